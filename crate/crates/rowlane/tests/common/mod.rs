//! Shared helpers for integration tests: directional finite-difference
//! gradient checks and random tensor construction.

#![allow(dead_code)]

use ndarray::{Array4, ArrayD};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use rowlane::nn::{Grads, Params, Real};

/// Central-difference step along a unit-scale direction. Individual
/// coordinates of a deep model can have gradients small enough that
/// per-coordinate quotients drown in the forward pass's accumulated
/// rounding; a whole-tensor direction keeps the derivative O(|g|) and
/// the check well conditioned.
const FD_EPS: f64 = 1e-5;

/// Richardson-extrapolated central difference of `f` at steps eps and
/// eps/2, cancelling the quadratic truncation term. Batch-norm over a
/// 2-element slice (the 16x16 bottleneck) has third derivatives around
/// 1e7, which a plain central difference at any workable step cannot
/// push below the tolerance.
fn richardson(mut f: impl FnMut(f64) -> f64, eps: f64) -> f64 {
    let full = (f(eps) - f(-eps)) / (2.0 * eps);
    let half = (f(eps / 2.0) - f(-eps / 2.0)) / eps;
    (4.0 * half - full) / 3.0
}

/// Symmetric relative error with a floor so near-zero pairs compare
/// absolutely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

pub fn rand4(dims: (usize, usize, usize, usize), rng: &mut ChaCha8Rng) -> Array4<f64> {
    Array4::from_shape_fn(dims, |_| rng.gen_range(-1.0..1.0))
}

/// Max relative error between the analytic directional derivative
/// `g . v` and its central finite difference, over `n_dirs` random
/// directions spanning every trainable tensor. `loss` must be a
/// deterministic pure function of the parameter store.
pub fn max_param_grad_err(
    params: &mut Params<f64>,
    analytic: &Grads<f64>,
    n_dirs: usize,
    rng: &mut ChaCha8Rng,
    mut loss: impl FnMut(&Params<f64>) -> f64,
) -> f64 {
    let ids: Vec<_> = params
        .ids()
        .filter(|&id| params.entry(id).trainable)
        .collect();
    let saved: Vec<ArrayD<f64>> = ids.iter().map(|&id| params.get(id).clone()).collect();
    let mut worst = 0.0f64;
    for _ in 0..n_dirs {
        let dirs: Vec<ArrayD<f64>> = saved
            .iter()
            .map(|t| ArrayD::from_shape_fn(t.raw_dim(), |_| rng.sample(StandardNormal)))
            .collect();
        let want: f64 = ids
            .iter()
            .zip(&dirs)
            .map(|(&id, d)| (analytic.get(id) * d).sum())
            .sum();
        let fd = richardson(
            |step| {
                for ((&id, orig), d) in ids.iter().zip(&saved).zip(&dirs) {
                    *params.get_mut(id) = orig + &(d * step);
                }
                loss(params)
            },
            FD_EPS,
        );
        for (&id, orig) in ids.iter().zip(&saved) {
            *params.get_mut(id) = orig.clone();
        }
        worst = worst.max(rel_err(fd, want));
    }
    worst
}

/// Directional finite-difference check of a gradient with respect to the
/// input tensor.
pub fn max_input_grad_err(
    x: &mut Array4<f64>,
    analytic: &Array4<f64>,
    n_dirs: usize,
    rng: &mut ChaCha8Rng,
    mut loss: impl FnMut(&Array4<f64>) -> f64,
) -> f64 {
    let saved = x.clone();
    let mut worst = 0.0f64;
    for _ in 0..n_dirs {
        let d: Array4<f64> = Array4::from_shape_fn(saved.raw_dim(), |_| rng.sample(StandardNormal));
        let want = (analytic * &d).sum();
        let fd = richardson(
            |step| {
                *x = &saved + &(&d * step);
                loss(x)
            },
            FD_EPS,
        );
        *x = saved.clone();
        worst = worst.max(rel_err(fd, want));
    }
    worst
}

/// Deterministic linear functional of a tensor, used to turn a model
/// output into a scalar whose output-gradient is known exactly.
pub struct LinearProbe {
    w: Vec<f64>,
}

impl LinearProbe {
    pub fn new(len: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        LinearProbe {
            w: (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        }
    }

    pub fn apply<T: Real, D: ndarray::Dimension>(&self, y: &ndarray::Array<T, D>) -> f64 {
        y.iter()
            .zip(&self.w)
            .map(|(&v, &w)| v.as_f64() * w)
            .sum()
    }

    /// The probe's weights reshaped as the output gradient.
    pub fn grad<D: ndarray::Dimension>(&self, dims: D) -> ndarray::Array<f64, D> {
        ndarray::Array::from_shape_vec(dims, self.w.clone()).expect("probe length")
    }
}
