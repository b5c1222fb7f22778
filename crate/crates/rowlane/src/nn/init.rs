//! Weight initialization.

use ndarray::ArrayD;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::Real;

/// He fan-in normal initialization: std = sqrt(2 / fan_in).
pub fn he_normal<T: Real, R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> ArrayD<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    normal(shape, 0.0, std, rng)
}

/// Normal(mean, std) in f64, cast to the element type.
pub fn normal<T: Real, R: Rng>(shape: &[usize], mean: f64, std: f64, rng: &mut R) -> ArrayD<T> {
    let dist = Normal::new(mean, std).expect("valid normal");
    let n: usize = shape.iter().product();
    let data: Vec<T> = (0..n).map(|_| T::of(dist.sample(rng))).collect();
    ArrayD::from_shape_vec(ndarray::IxDyn(shape), data).expect("shape/data agree")
}

pub fn zeros<T: Real>(shape: &[usize]) -> ArrayD<T> {
    ArrayD::zeros(ndarray::IxDyn(shape))
}

pub fn ones<T: Real>(shape: &[usize]) -> ArrayD<T> {
    ArrayD::ones(ndarray::IxDyn(shape))
}
