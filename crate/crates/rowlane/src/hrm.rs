//! Horizontal reduction module (HRM): a residual block that shrinks the
//! width of a feature map by ratio r while keeping channels and height.
//!
//! Main path: [SE if pre] -> horizontal unshuffle -> ConvBn(rC -> C, k)
//! -> ReLU -> [SE if standard]. Skip path: horizontal average pool ->
//! ConvBn(1x1). The two sum; [SE if post] applies after the sum. There is
//! no activation after the sum, so the post-SE variant differs from the
//! plain module only by a per-channel scale. Dropout on the output during
//! training.

use ndarray::{Array2, Array4};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::layers::{ConvBn, ConvBnCache, Linear, LinearCache};
use crate::nn::{ops, ForwardCtx, Grads, Params, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SePosition {
    None,
    Pre,
    Standard,
    Post,
}

impl std::str::FromStr for SePosition {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(SePosition::None),
            "pre" => Ok(SePosition::Pre),
            "standard" => Ok(SePosition::Standard),
            "post" => Ok(SePosition::Post),
            other => Err(Error::Config(format!(
                "unknown SE position '{other}' (expected none|pre|standard|post)"
            ))),
        }
    }
}

impl std::fmt::Display for SePosition {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            SePosition::None => "none",
            SePosition::Pre => "pre",
            SePosition::Standard => "standard",
            SePosition::Post => "post",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone)]
pub struct HrmConfig {
    pub channels: usize,
    pub ratio: usize,
    pub kernel: usize,
    pub se_position: SePosition,
    pub se_reduction: usize,
    pub dropout_p: f64,
}

impl HrmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ratio == 0 {
            return Err(Error::Config("HRM ratio must be >= 1".into()));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::Config(format!(
                "HRM kernel {} must be odd",
                self.kernel
            )));
        }
        if self.se_position != SePosition::None {
            if self.se_reduction == 0 || self.channels % self.se_reduction != 0 {
                return Err(Error::Config(format!(
                    "channels {} not divisible by SE reduction {}",
                    self.channels, self.se_reduction
                )));
            }
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config("dropout probability must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Width-unshuffle with the shape contract checked.
pub fn horizontal_unshuffle<T: Real>(x: &Array4<T>, r: usize) -> Result<Array4<T>> {
    let w = x.dim().3;
    if r == 0 || w % r != 0 {
        return Err(Error::Shape(format!(
            "width {w} not divisible by unshuffle ratio {r}"
        )));
    }
    Ok(ops::hunshuffle_fwd(x, r))
}

/// Exact inverse of [`horizontal_unshuffle`].
pub fn horizontal_shuffle<T: Real>(x: &Array4<T>, r: usize) -> Result<Array4<T>> {
    let c = x.dim().1;
    if r == 0 || c % r != 0 {
        return Err(Error::Shape(format!(
            "channels {c} not divisible by shuffle ratio {r}"
        )));
    }
    Ok(ops::hshuffle_fwd(x, r))
}

/// Squeeze-and-excitation gate: global pool -> FC bottleneck -> sigmoid
/// -> per-channel rescale.
pub struct SeBlock {
    fc1: Linear,
    fc2: Linear,
}

pub struct SeCache<T> {
    x: Array4<T>,
    h1: Array2<T>,
    s: Array2<T>,
    c1: LinearCache<T>,
    c2: LinearCache<T>,
}

impl SeBlock {
    pub fn new<T: Real>(
        ps: &mut Params<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        channels: usize,
        reduction: usize,
    ) -> Result<Self> {
        if reduction == 0 || channels % reduction != 0 {
            return Err(Error::Config(format!(
                "channels {channels} not divisible by SE reduction {reduction}"
            )));
        }
        let mid = channels / reduction;
        Ok(SeBlock {
            fc1: Linear::new(ps, rng, &format!("{name}.fc1"), channels, mid, true),
            fc2: Linear::new(ps, rng, &format!("{name}.fc2"), mid, channels, true),
        })
    }

    pub fn fwd<T: Real>(&self, ps: &Params<T>, x: &Array4<T>) -> (Array4<T>, SeCache<T>) {
        let pooled = ops::gap_fwd(x);
        let (a1, c1) = self.fc1.fwd(ps, &pooled);
        let h1 = a1.mapv(|v| if v > T::zero() { v } else { T::zero() });
        let (a2, c2) = self.fc2.fwd(ps, &h1);
        let s = a2.mapv(ops::sigmoid_scalar);
        let y = ops::channel_scale_fwd(x, &s);
        (
            y,
            SeCache {
                x: x.clone(),
                h1,
                s,
                c1,
                c2,
            },
        )
    }

    pub fn bwd<T: Real>(
        &self,
        ps: &Params<T>,
        grads: &mut Grads<T>,
        cache: &SeCache<T>,
        gy: &Array4<T>,
    ) -> Array4<T> {
        let (gx_scale, gs) = ops::channel_scale_bwd(&cache.x, &cache.s, gy);
        let mut ga2 = gs;
        ga2.zip_mut_with(&cache.s, |g, &s| *g = *g * s * (T::one() - s));
        let mut gh1 = self.fc2.bwd(ps, grads, &cache.c2, &ga2);
        gh1.zip_mut_with(&cache.h1, |g, &h| {
            if h <= T::zero() {
                *g = T::zero()
            }
        });
        let g_pooled = self.fc1.bwd(ps, grads, &cache.c1, &gh1);
        let (_, _, h, w) = cache.x.dim();
        gx_scale + ops::gap_bwd(&g_pooled, h, w)
    }

    fn macs(&self) -> u64 {
        (self.fc1.in_f * self.fc1.out_f + self.fc2.in_f * self.fc2.out_f) as u64
    }
}

pub struct Hrm {
    pub cfg: HrmConfig,
    main: ConvBn,
    skip: ConvBn,
    se: Option<SeBlock>,
}

pub struct HrmCache<T> {
    pre_se: Option<SeCache<T>>,
    main: ConvBnCache<T>,
    m: Array4<T>,
    std_se: Option<SeCache<T>>,
    skip: ConvBnCache<T>,
    post_se: Option<SeCache<T>>,
    dropout: Option<Array4<T>>,
}

impl Hrm {
    pub fn new<T: Real>(
        ps: &mut Params<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        cfg: &HrmConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let main = ConvBn::new(
            ps,
            rng,
            &format!("{name}.main"),
            c * cfg.ratio,
            c,
            cfg.kernel,
            1,
        );
        let skip = ConvBn::new(ps, rng, &format!("{name}.skip"), c, c, 1, 1);
        let se = if cfg.se_position != SePosition::None {
            Some(SeBlock::new(
                ps,
                rng,
                &format!("{name}.se"),
                c,
                cfg.se_reduction,
            )?)
        } else {
            None
        };
        Ok(Hrm {
            cfg: cfg.clone(),
            main,
            skip,
            se,
        })
    }

    /// (B, C, H, W) -> (B, C, H, W/r). `tap_prefix` names this module's
    /// activations in the capture list.
    pub fn fwd<T: Real>(
        &self,
        ps: &Params<T>,
        ctx: &mut ForwardCtx<'_, T>,
        x: &Array4<T>,
        tap_prefix: Option<&str>,
    ) -> Result<(Array4<T>, HrmCache<T>)> {
        let r = self.cfg.ratio;
        let se_tap = |ctx: &mut ForwardCtx<'_, T>, before: &Array4<T>, after: &Array4<T>| {
            if let Some(prefix) = tap_prefix {
                ctx.tap(&format!("{prefix}_pre_se"), before);
                ctx.tap(&format!("{prefix}_post_se"), after);
            }
        };

        let (main_in, pre_se) = if self.cfg.se_position == SePosition::Pre {
            let (t, cache) = self.se.as_ref().unwrap().fwd(ps, x);
            se_tap(ctx, x, &t);
            (t, Some(cache))
        } else {
            (x.clone(), None)
        };
        let u = horizontal_unshuffle(&main_in, r)?;
        let (m_pre, main_cache) = self.main.fwd(ps, ctx, &u);
        let m = ops::relu_fwd(&m_pre);
        let (m, std_se) = if self.cfg.se_position == SePosition::Standard {
            let (t, cache) = self.se.as_ref().unwrap().fwd(ps, &m);
            se_tap(ctx, &m, &t);
            (t, Some(cache))
        } else {
            (m.clone(), None)
        };

        let pooled = ops::hpool_avg_fwd(x, r);
        let (s, skip_cache) = self.skip.fwd(ps, ctx, &pooled);

        let summed = m.clone() + &s;
        let (mut y, post_se) = if self.cfg.se_position == SePosition::Post {
            let (t, cache) = self.se.as_ref().unwrap().fwd(ps, &summed);
            se_tap(ctx, &summed, &t);
            (t, Some(cache))
        } else {
            (summed, None)
        };

        let dropout = if ctx.is_train() && self.cfg.dropout_p > 0.0 {
            let rng = ctx
                .rng
                .as_deref_mut()
                .expect("training forward requires an RNG for dropout");
            let mask = ops::dropout_mask::<T, _>(y.dim(), self.cfg.dropout_p, rng);
            y = y * &mask;
            Some(mask)
        } else {
            None
        };

        if let Some(prefix) = tap_prefix {
            ctx.tap(prefix, &y);
        }
        Ok((
            y,
            HrmCache {
                pre_se,
                main: main_cache,
                m,
                std_se,
                skip: skip_cache,
                post_se,
                dropout,
            },
        ))
    }

    pub fn bwd<T: Real>(
        &self,
        ps: &Params<T>,
        grads: &mut Grads<T>,
        cache: &HrmCache<T>,
        gy: &Array4<T>,
    ) -> Array4<T> {
        let r = self.cfg.ratio;
        let mut g = gy.clone();
        if let Some(mask) = &cache.dropout {
            g = g * mask;
        }
        if let Some(se_cache) = &cache.post_se {
            g = self.se.as_ref().unwrap().bwd(ps, grads, se_cache, &g);
        }
        // Sum splits gradient equally into both paths.
        let mut g_main = g.clone();
        let g_skip = g;

        if let Some(se_cache) = &cache.std_se {
            g_main = self.se.as_ref().unwrap().bwd(ps, grads, se_cache, &g_main);
        }
        // cache.m holds the pre-standard-SE activation (ReLU output).
        let g_m_pre = ops::relu_bwd(&cache.m, &g_main);
        let g_u = self.main.bwd(ps, grads, &cache.main, &g_m_pre);
        let mut gx = ops::hshuffle_fwd(&g_u, r);
        if let Some(se_cache) = &cache.pre_se {
            gx = self.se.as_ref().unwrap().bwd(ps, grads, se_cache, &gx);
        }

        let g_pooled = self.skip.bwd(ps, grads, &cache.skip, &g_skip);
        gx + ops::hpool_avg_bwd(&g_pooled, r)
    }

    /// Forward multiply-accumulates at input size (h, w).
    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let wo = w / self.cfg.ratio;
        let mut total = self.main.macs(h, wo) + self.skip.macs(h, wo);
        if let Some(se) = &self.se {
            total += se.macs();
        }
        total
    }
}

/// Stage layout for the reduction stack: shared stages run once for all
/// lanes; lane stages are replicated per lane with independent weights.
#[derive(Debug, Clone)]
pub struct HrmStackPlan {
    pub shared: Vec<HrmConfig>,
    pub lane: Vec<HrmConfig>,
}

impl HrmStackPlan {
    pub fn all_stages(&self) -> impl Iterator<Item = &HrmConfig> {
        self.shared.iter().chain(self.lane.iter())
    }
}

/// Plan the stack for a given decoder output width: width-halving stages
/// (r=2, k=3) down to `final_collapse_ratio`, then one lane-wise stage
/// with k=1 collapsing the remaining width to 1. The first `shared_count`
/// halving stages are shared.
pub fn build_hrm_stack(
    decoder_width: usize,
    shared_count: usize,
    channels: usize,
    se_position: SePosition,
    se_reduction: usize,
    dropout_p: f64,
    final_collapse_ratio: usize,
) -> Result<HrmStackPlan> {
    if decoder_width == 0 || final_collapse_ratio == 0 {
        return Err(Error::Config("widths must be positive".into()));
    }
    let fcr = final_collapse_ratio.min(decoder_width);
    if decoder_width % fcr != 0 || !(decoder_width / fcr).is_power_of_two() {
        return Err(Error::Config(format!(
            "decoder width {decoder_width} is not a power of two times the \
             collapse ratio {fcr}"
        )));
    }
    let halvings = (decoder_width / fcr).trailing_zeros() as usize;
    if shared_count > halvings {
        return Err(Error::Config(format!(
            "{shared_count} shared stages requested but width {decoder_width} \
             only supports {halvings} halving stages"
        )));
    }
    let stage = |ratio: usize, kernel: usize| HrmConfig {
        channels,
        ratio,
        kernel,
        se_position,
        se_reduction,
        dropout_p,
    };
    let mut shared = Vec::new();
    let mut lane = Vec::new();
    for i in 0..halvings {
        if i < shared_count {
            shared.push(stage(2, 3));
        } else {
            lane.push(stage(2, 3));
        }
    }
    lane.push(stage(fcr, 1));
    let plan = HrmStackPlan { shared, lane };
    for cfg in plan.all_stages() {
        cfg.validate()?;
    }
    Ok(plan)
}
