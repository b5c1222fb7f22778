//! Training objectives: three interchangeable vertex-location losses
//! (cross-entropy, Laplace KL divergence, piecewise linear), binary
//! cross-entropy for the two confidence heads, and the weighted total.
//!
//! Vertex losses aggregate per lane as a mean over rows that carry a
//! vertex, then as a mean over lanes; lanes with no vertices contribute
//! zero. Every loss here returns its gradient alongside the value so the
//! model's backward pass needs no framework.

use ndarray::s;

use crate::encoding::RowwiseTarget;
use crate::error::{Error, Result};
use crate::heads::PredictionBatch;
use crate::nn::Real;

/// Floor on the predicted Laplace scale; keeps the KL finite when the
/// softmax collapses to a single bin.
pub const B_FLOOR: f64 = 1e-3;
/// Additive guard inside the piecewise-linear log.
pub const PL_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VertexLossType {
    Ce,
    Kl,
    Pl,
}

impl std::str::FromStr for VertexLossType {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ce" | "CE" => Ok(VertexLossType::Ce),
            "kl" | "KL" => Ok(VertexLossType::Kl),
            "pl" | "PL" => Ok(VertexLossType::Pl),
            other => Err(Error::Config(format!(
                "unknown vertex loss '{other}' (expected ce|kl|pl)"
            ))),
        }
    }
}

impl std::fmt::Display for VertexLossType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            VertexLossType::Ce => "ce",
            VertexLossType::Kl => "kl",
            VertexLossType::Pl => "pl",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    pub vertex_loss_type: VertexLossType,
    /// Weight of the vertex-confidence loss.
    pub lambda1: f64,
    /// Weight of the lane-confidence loss.
    pub lambda2: f64,
    /// Scale of the ground-truth Laplace distribution (KL loss only).
    pub laplace_b_gt: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            vertex_loss_type: VertexLossType::Ce,
            lambda1: 10.0,
            lambda2: 1.0,
            laplace_b_gt: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            return Err(Error::Config("loss weights must be >= 0".into()));
        }
        if self.laplace_b_gt <= 0.0 {
            return Err(Error::Config("laplace_b_gt must be > 0".into()));
        }
        Ok(())
    }
}

/// Scalar loss components of one batch.
#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub vl: f64,
    pub vc: f64,
    pub lc: f64,
    pub total: f64,
}

/// `vl + lambda1*vc + lambda2*lc`, exactly as written.
pub fn total_loss(vl: f64, vc: f64, lc: f64, cfg: &LossConfig) -> f64 {
    vl + cfg.lambda1 * vc + cfg.lambda2 * lc
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|&v| (v - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln()
}

/// Mean and mean absolute deviation of the soft-argmax distribution over
/// bin indices 0..w'-1. The deviation is returned unfloored.
pub fn softargmax_stats(row: &[f64]) -> (f64, f64) {
    let p = softmax(row);
    let mu: f64 = p.iter().enumerate().map(|(k, &pk)| pk * k as f64).sum();
    let b: f64 = p
        .iter()
        .enumerate()
        .map(|(k, &pk)| pk * (k as f64 - mu).abs())
        .sum();
    (mu, b)
}

/// Closed-form KL(Laplace(x_gt, b_gt) || Laplace(mu, b)).
pub fn laplace_kl(x_gt: f64, b_gt: f64, mu: f64, b: f64) -> f64 {
    let d = (x_gt - mu).abs();
    (b / b_gt).ln() + (b_gt * (-d / b_gt).exp() + d) / b - 1.0
}

/// Numerically stable sigmoid binary cross-entropy; returns (loss, dloss/dz).
pub fn bce_with_logits(z: f64, t: f64) -> (f64, f64) {
    let loss = z.max(0.0) - z * t + (1.0 + (-z.abs()).exp()).ln();
    let sig = if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    };
    (loss, sig - t)
}

/// Softmax cross-entropy against bin `k_gt`; returns (loss, dloss/dlogits).
fn ce_row(row: &[f64], k_gt: usize) -> (f64, Vec<f64>) {
    let loss = log_sum_exp(row) - row[k_gt];
    let mut grad = softmax(row);
    grad[k_gt] -= 1.0;
    (loss, grad)
}

/// KL between the target Laplace at `x_gt` and the soft-argmax Laplace fit.
fn kl_row(row: &[f64], x_gt: f64, b_gt: f64) -> (f64, Vec<f64>) {
    let p = softmax(row);
    let (mu, b_raw) = softargmax_stats(row);
    let b = b_raw.max(B_FLOOR);
    let d = (x_gt - mu).abs();
    let loss = laplace_kl(x_gt, b_gt, mu, b);

    let sign_mu = if mu > x_gt {
        1.0
    } else if mu < x_gt {
        -1.0
    } else {
        0.0
    };
    let dl_dmu = sign_mu * (1.0 - (-d / b_gt).exp()) / b;
    let dl_db = if b_raw >= B_FLOOR {
        1.0 / b - (b_gt * (-d / b_gt).exp() + d) / (b * b)
    } else {
        0.0 // floor active: b does not respond to the logits
    };
    // S = sum_j p_j * sign(mu - j), the sensitivity of the deviation to mu.
    let s_term: f64 = p
        .iter()
        .enumerate()
        .map(|(j, &pj)| {
            let diff = mu - j as f64;
            if diff > 0.0 {
                pj
            } else if diff < 0.0 {
                -pj
            } else {
                0.0
            }
        })
        .sum();
    let grad = p
        .iter()
        .enumerate()
        .map(|(m, &pm)| {
            let dmu = pm * (m as f64 - mu);
            let db = pm * ((m as f64 - mu).abs() - b_raw) + s_term * dmu;
            dl_dmu * dmu + dl_db * db
        })
        .collect();
    (loss, grad)
}

/// Piecewise-linear likelihood at real-valued column `x`.
fn pl_row(row: &[f64], x: f64) -> (f64, Vec<f64>) {
    let wp = row.len();
    let max_x = (wp - 1) as f64;
    let xc = if (0.0..=max_x).contains(&x) {
        x
    } else {
        log::warn!("piecewise-linear target {x} outside [0, {max_x}], clamping");
        x.clamp(0.0, max_x)
    };
    let p = softmax(row);
    let k = (xc.floor() as usize).min(wp - 1);
    let frac = xc - k as f64;
    // Interpolation weights on the two straddling bins.
    let (wk, wk1) = (1.0 - frac, frac);
    let q = if frac == 0.0 {
        p[k]
    } else {
        p[k] * wk + p[k + 1] * wk1
    };
    let q_guard = q + PL_EPS;
    if q_guard >= 1.0 {
        // Clamped to probability 1: zero loss, zero gradient.
        return (0.0, vec![0.0; wp]);
    }
    let loss = -q_guard.ln();
    let dl_dq = -1.0 / q_guard;
    let grad = p
        .iter()
        .enumerate()
        .map(|(m, &pm)| {
            let contrib = if m == k {
                wk * pm
            } else if frac > 0.0 && m == k + 1 {
                wk1 * pm
            } else {
                0.0
            };
            dl_dq * (contrib - pm * q)
        })
        .collect();
    (loss, grad)
}

/// Vertex-location loss and gradient for one image. Writes per-row logit
/// gradients scaled by `grad_scale` into `df` (shape (N, h', w')).
fn vertex_loss_image<T: Real>(
    f: &ndarray::ArrayView3<'_, T>,
    target: &RowwiseTarget,
    cfg: &LossConfig,
    grad_scale: f64,
    df: &mut ndarray::ArrayViewMut3<'_, T>,
) -> f64 {
    let (n, k, _) = f.dim();
    let mut lane_sum = 0.0;
    for ni in 0..n {
        let rows: Vec<usize> = (0..k).filter(|&j| target.e[[ni, j]] == 1).collect();
        if rows.is_empty() {
            continue;
        }
        let inv_cnt = 1.0 / rows.len() as f64;
        let mut row_sum = 0.0;
        for &j in &rows {
            let logits: Vec<f64> = f.slice(s![ni, j, ..]).iter().map(|v| v.as_f64()).collect();
            let (loss, grad) = match cfg.vertex_loss_type {
                VertexLossType::Ce => ce_row(&logits, target.x_gt[[ni, j]] as usize),
                VertexLossType::Kl => kl_row(
                    &logits,
                    target.x_gt[[ni, j]] as f64,
                    cfg.laplace_b_gt,
                ),
                VertexLossType::Pl => pl_row(&logits, target.x_real[[ni, j]]),
            };
            row_sum += loss;
            let scale = grad_scale * inv_cnt / n as f64;
            let mut dst = df.slice_mut(s![ni, j, ..]);
            for (d, g) in dst.iter_mut().zip(grad.iter()) {
                *d = *d + T::of(g * scale);
            }
        }
        lane_sum += row_sum * inv_cnt;
    }
    lane_sum / n as f64
}

/// All loss terms and their gradients for a batch.
///
/// Returns the scalar parts (batch means) and a gradient with the same
/// shapes as the prediction, ready for the model's backward pass.
pub fn compute_losses<T: Real>(
    pred: &PredictionBatch<T>,
    targets: &[RowwiseTarget],
    cfg: &LossConfig,
) -> (LossParts, PredictionBatch<T>) {
    let (bsz, n, k, wp) = pred.f.dim();
    assert_eq!(bsz, targets.len(), "one target per image");
    let mut grads = PredictionBatch {
        f: ndarray::Array4::<T>::zeros((bsz, n, k, wp)),
        vc: ndarray::Array3::<T>::zeros((bsz, n, k)),
        lc: ndarray::Array2::<T>::zeros((bsz, n)),
    };
    let inv_b = 1.0 / bsz as f64;
    let mut vl_sum = 0.0;
    let mut vc_sum = 0.0;
    let mut lc_sum = 0.0;
    for (bi, target) in targets.iter().enumerate() {
        let f = pred.f.slice(s![bi, .., .., ..]);
        let mut df = grads.f.slice_mut(s![bi, .., .., ..]);
        vl_sum += vertex_loss_image(&f, target, cfg, inv_b, &mut df);

        let mut cell_sum = 0.0;
        for ni in 0..n {
            for j in 0..k {
                let z = pred.vc[[bi, ni, j]].as_f64();
                let t = target.e[[ni, j]] as f64;
                let (loss, dz) = bce_with_logits(z, t);
                cell_sum += loss;
                grads.vc[[bi, ni, j]] =
                    T::of(cfg.lambda1 * dz * inv_b / (n * k) as f64);
            }
        }
        vc_sum += cell_sum / (n * k) as f64;

        let mut lane_sum = 0.0;
        for ni in 0..n {
            let z = pred.lc[[bi, ni]].as_f64();
            let t = target.lane_exists[ni] as f64;
            let (loss, dz) = bce_with_logits(z, t);
            lane_sum += loss;
            grads.lc[[bi, ni]] = T::of(cfg.lambda2 * dz * inv_b / n as f64);
        }
        lc_sum += lane_sum / n as f64;
    }
    let vl = vl_sum * inv_b;
    let vc = vc_sum * inv_b;
    let lc = lc_sum * inv_b;
    let parts = LossParts {
        vl,
        vc,
        lc,
        total: total_loss(vl, vc, lc, cfg),
    };
    (parts, grads)
}
