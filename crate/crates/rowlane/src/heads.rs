//! Full detector and its three output branches: per-row vertex-location
//! logits, per-row vertex confidence, and per-lane existence confidence.
//!
//! Composition: backbone -> shared reduction stages -> per-lane reduction
//! chains. The lane-confidence head reads the last shared feature (global
//! average pool + FC); the location and vertex-confidence heads read each
//! lane's fully width-collapsed feature, one linear map per row.

use ndarray::{s, Array2, Array3, Array4};
use rand_chacha::ChaCha8Rng;

use crate::backbone::{Backbone, BackboneCache, BackboneConfig};
use crate::error::{Error, Result};
use crate::hrm::{build_hrm_stack, Hrm, HrmCache, SePosition};
use crate::nn::layers::{Linear, LinearCache};
use crate::nn::{ops, ForwardCtx, Grads, Params, Real};

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorConfig {
    pub net_h: usize,
    pub net_w: usize,
    pub in_channels: usize,
    pub stage_channels: Vec<usize>,
    /// Channel count C carried from the decoder through every reduction stage.
    pub channels: usize,
    pub num_lanes: usize,
    /// How many width-halving stages run once for all lanes.
    pub shared_count: usize,
    pub se_position: SePosition,
    pub se_reduction: usize,
    pub dropout_p: f64,
    pub final_collapse_ratio: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            net_h: 128,
            net_w: 256,
            in_channels: 3,
            stage_channels: vec![32, 64, 96, 96],
            channels: 96,
            num_lanes: 4,
            shared_count: 3,
            se_position: SePosition::Post,
            se_reduction: 16,
            dropout_p: 0.1,
            final_collapse_ratio: 4,
        }
    }
}

impl DetectorConfig {
    /// Rows in the prediction grid (one classification problem per row).
    pub fn grid_h(&self) -> usize {
        self.net_h / 2
    }

    /// Columns in the prediction grid = classes per row.
    pub fn grid_w(&self) -> usize {
        self.net_w / 2
    }

    pub fn backbone_config(&self) -> BackboneConfig {
        BackboneConfig {
            in_channels: self.in_channels,
            stage_channels: self.stage_channels.clone(),
            out_channels: self.channels,
            net_h: self.net_h,
            net_w: self.net_w,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone_config().validate()?;
        if self.num_lanes == 0 {
            return Err(Error::Config("num_lanes must be >= 1".into()));
        }
        // Also validates shared_count and the width factorization.
        build_hrm_stack(
            self.grid_w(),
            self.shared_count,
            self.channels,
            self.se_position,
            self.se_reduction,
            self.dropout_p,
            self.final_collapse_ratio,
        )?;
        Ok(())
    }
}

/// Raw model outputs for a batch.
///
/// `f`: vertex-location logits (B, N, h', w'); `vc`: vertex-confidence
/// logits (B, N, h'); `lc`: lane-confidence logits (B, N).
#[derive(Debug, Clone)]
pub struct PredictionBatch<T> {
    pub f: Array4<T>,
    pub vc: Array3<T>,
    pub lc: Array2<T>,
}

/// One image's outputs, extracted from a batch for decoding.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub f: Array3<f64>,
    pub vc: Array2<f64>,
    pub lc: ndarray::Array1<f64>,
}

impl<T: Real> PredictionBatch<T> {
    pub fn image(&self, b: usize) -> Prediction {
        Prediction {
            f: self.f.slice(s![b, .., .., ..]).mapv(Real::as_f64),
            vc: self.vc.slice(s![b, .., ..]).mapv(Real::as_f64),
            lc: self.lc.slice(s![b, ..]).mapv(Real::as_f64),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.f.iter().all(|v| v.as_f64().is_finite())
            && self.vc.iter().all(|v| v.as_f64().is_finite())
            && self.lc.iter().all(|v| v.as_f64().is_finite())
    }
}

struct LaneBranch {
    stages: Vec<Hrm>,
    loc: Linear,
    vc: Linear,
}

struct LaneCache<T> {
    stages: Vec<HrmCache<T>>,
    loc: LinearCache<T>,
    vc: LinearCache<T>,
}

pub struct DetectorCache<T> {
    backbone: BackboneCache<T>,
    shared: Vec<HrmCache<T>>,
    shared_dim: (usize, usize, usize, usize),
    lc: LinearCache<T>,
    lanes: Vec<LaneCache<T>>,
}

pub struct LaneDetector {
    pub cfg: DetectorConfig,
    pub backbone: Backbone,
    shared: Vec<Hrm>,
    lc_head: Linear,
    lanes: Vec<LaneBranch>,
}

/// (B, C, K, 1) -> (B*K, C) so the per-row heads become one matrix multiply.
fn rows_to_matrix<T: Real>(x: &Array4<T>) -> Result<Array2<T>> {
    let (b, c, k, w) = x.dim();
    if w != 1 {
        return Err(Error::Shape(format!(
            "row heads expect a width-1 feature, got width {w}"
        )));
    }
    let t = x.view().permuted_axes([0, 2, 1, 3]);
    let flat: Vec<T> = t.iter().copied().collect();
    Ok(Array2::from_shape_vec((b * k, c), flat).expect("row flatten"))
}

/// Inverse of [`rows_to_matrix`] for gradients.
fn matrix_to_rows<T: Real>(g: &Array2<T>, b: usize, c: usize, k: usize) -> Array4<T> {
    let mut out = Array4::<T>::zeros((b, c, k, 1));
    for bi in 0..b {
        for ki in 0..k {
            let row = g.row(bi * k + ki);
            for ci in 0..c {
                out[[bi, ci, ki, 0]] = row[ci];
            }
        }
    }
    out
}

impl LaneDetector {
    pub fn new<T: Real>(
        ps: &mut Params<T>,
        rng: &mut ChaCha8Rng,
        cfg: &DetectorConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let backbone = Backbone::new(ps, rng, &cfg.backbone_config())?;
        let plan = build_hrm_stack(
            cfg.grid_w(),
            cfg.shared_count,
            cfg.channels,
            cfg.se_position,
            cfg.se_reduction,
            cfg.dropout_p,
            cfg.final_collapse_ratio,
        )?;
        let shared = plan
            .shared
            .iter()
            .enumerate()
            .map(|(i, scfg)| Hrm::new(ps, rng, &format!("shared{i}"), scfg))
            .collect::<Result<Vec<_>>>()?;
        let lc_head = Linear::new(ps, rng, "lc_head", cfg.channels, cfg.num_lanes, true);
        let mut lanes = Vec::with_capacity(cfg.num_lanes);
        for n in 0..cfg.num_lanes {
            let stages = plan
                .lane
                .iter()
                .enumerate()
                .map(|(j, scfg)| Hrm::new(ps, rng, &format!("lane{n}.hrm{j}"), scfg))
                .collect::<Result<Vec<_>>>()?;
            let loc = Linear::new(
                ps,
                rng,
                &format!("lane{n}.loc"),
                cfg.channels,
                cfg.grid_w(),
                true,
            );
            let vc = Linear::new(ps, rng, &format!("lane{n}.vc"), cfg.channels, 1, true);
            lanes.push(LaneBranch { stages, loc, vc });
        }
        Ok(LaneDetector {
            cfg: cfg.clone(),
            backbone,
            shared,
            lc_head,
            lanes,
        })
    }

    /// image batch (B, in_c, net_h, net_w) -> predictions.
    pub fn fwd<T: Real>(
        &self,
        ps: &Params<T>,
        ctx: &mut ForwardCtx<'_, T>,
        x: &Array4<T>,
    ) -> Result<(PredictionBatch<T>, DetectorCache<T>)> {
        let (feat, bb_cache) = self.backbone.fwd(ps, ctx, x)?;
        let mut cur = feat;
        let mut shared_caches = Vec::with_capacity(self.shared.len());
        for (i, stage) in self.shared.iter().enumerate() {
            let name = format!("shared_hrm{}", i + 1);
            let (y, cache) = stage.fwd(ps, ctx, &cur, Some(&name))?;
            shared_caches.push(cache);
            cur = y;
        }
        let shared_out = cur;
        let shared_dim = shared_out.dim();
        let (bsz, _, _, _) = shared_dim;
        let k = self.cfg.grid_h();
        let wg = self.cfg.grid_w();
        let n = self.cfg.num_lanes;

        let pooled = ops::gap_fwd(&shared_out);
        let (lc, lc_cache) = self.lc_head.fwd(ps, &pooled);

        let mut f = Array4::<T>::zeros((bsz, n, k, wg));
        let mut vc = Array3::<T>::zeros((bsz, n, k));
        let mut lane_caches = Vec::with_capacity(n);
        for (ni, lane) in self.lanes.iter().enumerate() {
            let mut feat_n = shared_out.clone();
            let mut stage_caches = Vec::with_capacity(lane.stages.len());
            for stage in &lane.stages {
                let (y, cache) = stage.fwd(ps, ctx, &feat_n, None)?;
                stage_caches.push(cache);
                feat_n = y;
            }
            let rows = rows_to_matrix(&feat_n)?;
            let (f_n, loc_cache) = lane.loc.fwd(ps, &rows);
            let (v_n, vc_cache) = lane.vc.fwd(ps, &rows);
            for bi in 0..bsz {
                for ki in 0..k {
                    let src = f_n.row(bi * k + ki);
                    f.slice_mut(s![bi, ni, ki, ..]).assign(&src);
                    vc[[bi, ni, ki]] = v_n[[bi * k + ki, 0]];
                }
            }
            lane_caches.push(LaneCache {
                stages: stage_caches,
                loc: loc_cache,
                vc: vc_cache,
            });
        }
        Ok((
            PredictionBatch { f, vc, lc },
            DetectorCache {
                backbone: bb_cache,
                shared: shared_caches,
                shared_dim,
                lc: lc_cache,
                lanes: lane_caches,
            },
        ))
    }

    /// Back-propagate output gradients; returns the input-image gradient.
    pub fn bwd<T: Real>(
        &self,
        ps: &Params<T>,
        grads: &mut Grads<T>,
        cache: &DetectorCache<T>,
        gy: &PredictionBatch<T>,
    ) -> Array4<T> {
        let (bsz, c, sh, sw) = cache.shared_dim;
        let k = self.cfg.grid_h();
        let wg = self.cfg.grid_w();
        let mut g_shared = Array4::<T>::zeros((bsz, c, sh, sw));

        let g_pooled = self.lc_head.bwd(ps, grads, &cache.lc, &gy.lc);
        g_shared = g_shared + ops::gap_bwd(&g_pooled, sh, sw);

        for (ni, lane) in self.lanes.iter().enumerate() {
            let lane_cache = &cache.lanes[ni];
            let mut gf_rows = Array2::<T>::zeros((bsz * k, wg));
            let mut gv_rows = Array2::<T>::zeros((bsz * k, 1));
            for bi in 0..bsz {
                for ki in 0..k {
                    gf_rows
                        .row_mut(bi * k + ki)
                        .assign(&gy.f.slice(s![bi, ni, ki, ..]));
                    gv_rows[[bi * k + ki, 0]] = gy.vc[[bi, ni, ki]];
                }
            }
            let g1 = lane.loc.bwd(ps, grads, &lane_cache.loc, &gf_rows);
            let g2 = lane.vc.bwd(ps, grads, &lane_cache.vc, &gv_rows);
            let mut g = matrix_to_rows(&(g1 + g2), bsz, c, k);
            for (stage, scache) in lane
                .stages
                .iter()
                .zip(lane_cache.stages.iter())
                .rev()
            {
                g = stage.bwd(ps, grads, scache, &g);
            }
            g_shared = g_shared + g;
        }

        let mut g = g_shared;
        for (stage, scache) in self.shared.iter().zip(cache.shared.iter()).rev() {
            g = stage.bwd(ps, grads, scache, &g);
        }
        self.backbone.bwd(ps, grads, &cache.backbone, &g)
    }

    /// Forward multiply-accumulates per image.
    pub fn macs(&self) -> u64 {
        let mut total = self.backbone.macs();
        let k = self.cfg.grid_h();
        let mut w = self.cfg.grid_w();
        for stage in &self.shared {
            total += stage.macs(k, w);
            w /= stage.cfg.ratio;
        }
        let mut lane_total = 0u64;
        for lane in &self.lanes {
            let mut lw = w;
            for stage in &lane.stages {
                lane_total += stage.macs(k, lw);
                lw /= stage.cfg.ratio;
            }
            // Row heads: one C->w' and one C->1 map per grid row.
            lane_total +=
                (k * self.cfg.channels * self.cfg.grid_w()) as u64 + (k * self.cfg.channels) as u64;
        }
        total + lane_total + (self.cfg.channels * self.cfg.num_lanes) as u64
    }
}
