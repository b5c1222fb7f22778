//! Minimal neural-network toolkit: a named parameter store, hand-written
//! forward/backward ops, and weight initialization.
//!
//! Every op is generic over the element type so the same code path runs in
//! f32 for training and f64 for finite-difference gradient checks.

pub mod init;
pub mod layers;
pub mod ops;

use ndarray::{ArrayD, ArrayViewD, IxDyn};
use num_traits::Float;

/// Scalar element type for all tensors in the crate.
pub trait Real:
    Float
    + num_traits::FromPrimitive
    + ndarray::LinalgScalar
    + ndarray::ScalarOperand
    + std::fmt::Debug
    + std::fmt::Display
    + std::iter::Sum
    + Send
    + Sync
    + 'static
{
    fn of(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    fn of(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn of(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// Handle to one tensor in a [`Params`] store.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
pub struct ParamEntry<T> {
    pub name: String,
    pub value: ArrayD<T>,
    /// Updated by the optimizer. Running batch-norm statistics are stored
    /// here too but with `trainable = false`.
    pub trainable: bool,
    /// Whether weight decay applies (convolution / linear weights only).
    pub decay: bool,
}

/// Flat, ordered store of all model tensors. Iteration order is creation
/// order, which keeps optimizer updates and checkpoints deterministic.
#[derive(Debug, Clone)]
pub struct Params<T> {
    entries: Vec<ParamEntry<T>>,
}

impl<T: Real> Params<T> {
    pub fn new() -> Self {
        Params {
            entries: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: ArrayD<T>, decay: bool) -> ParamId {
        self.entries.push(ParamEntry {
            name: name.into(),
            value,
            trainable: true,
            decay,
        });
        ParamId(self.entries.len() - 1)
    }

    /// Non-trainable state (batch-norm running statistics).
    pub fn add_buffer(&mut self, name: impl Into<String>, value: ArrayD<T>) -> ParamId {
        self.entries.push(ParamEntry {
            name: name.into(),
            value,
            trainable: false,
            decay: false,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &ArrayD<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ArrayD<T> {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry<T>] {
        &mut self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    /// Gradient buffers aligned with this store, all zeros.
    pub fn zero_grads(&self) -> Grads<T> {
        Grads {
            entries: self
                .entries
                .iter()
                .map(|e| ArrayD::zeros(e.value.raw_dim()))
                .collect(),
        }
    }

    /// Total number of scalar parameters (trainable only).
    pub fn n_scalars(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.len())
            .sum()
    }
}

impl<T: Real> Default for Params<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradient buffers, index-aligned with a [`Params`] store.
#[derive(Debug, Clone)]
pub struct Grads<T> {
    entries: Vec<ArrayD<T>>,
}

impl<T: Real> Grads<T> {
    pub fn get(&self, id: ParamId) -> &ArrayD<T> {
        &self.entries[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ArrayD<T> {
        &mut self.entries[id.0]
    }

    pub fn accumulate(&mut self, id: ParamId, delta: ArrayViewD<'_, T>) {
        let dst = &mut self.entries[id.0];
        debug_assert_eq!(dst.raw_dim(), delta.raw_dim());
        dst.zip_mut_with(&delta, |d, &s| *d = *d + s);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Helper for building dynamic-dim arrays from shapes.
pub fn dyn_shape(dims: &[usize]) -> IxDyn {
    IxDyn(dims)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-forward-pass state threaded through the model.
///
/// Training passes need an RNG (dropout masks) and collect the batch-norm
/// running-statistic updates, which the trainer commits after the step so
/// the forward pass itself never mutates the parameter store.
pub struct ForwardCtx<'a, T: Real> {
    pub mode: Mode,
    pub rng: Option<&'a mut rand_chacha::ChaCha8Rng>,
    pub buffer_updates: Vec<(ParamId, ArrayD<T>)>,
    /// Named intermediate activations, captured on demand for inspection.
    pub taps: Option<&'a mut Vec<(String, ndarray::Array4<T>)>>,
}

impl<'a, T: Real> ForwardCtx<'a, T> {
    pub fn eval() -> Self {
        ForwardCtx {
            mode: Mode::Eval,
            rng: None,
            buffer_updates: Vec::new(),
            taps: None,
        }
    }

    pub fn train(rng: &'a mut rand_chacha::ChaCha8Rng) -> Self {
        ForwardCtx {
            mode: Mode::Train,
            rng: Some(rng),
            buffer_updates: Vec::new(),
            taps: None,
        }
    }

    pub fn is_train(&self) -> bool {
        self.mode == Mode::Train
    }

    pub fn tap(&mut self, name: &str, value: &ndarray::Array4<T>) {
        if let Some(ts) = self.taps.as_mut() {
            ts.push((name.to_string(), value.clone()));
        }
    }
}
