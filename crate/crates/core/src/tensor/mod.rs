//! Dense row-major tensors and the reverse-mode gradient tape.
//!
//! [`Tensor`] is the universal numeric carrier: a shape plus a flat value
//! buffer (last axis fastest). Forward operations live in [`ops`] and
//! record themselves on a [`Tape`]; `Tape::backward` replays the recording
//! in reverse and leaves gradients on every `requires_grad` leaf.

pub mod kernels;
pub mod ops;
pub mod tape;

pub use tape::{Tape, TensorId};

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T: Scalar> {
    shape: Vec<usize>,
    data: Vec<T>,
    pub requires_grad: bool,
    /// Populated on leaves by `Tape::backward`; always the same shape as `data`.
    pub grad: Option<Vec<T>>,
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Row-major strides, last axis fastest.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::dim(format!("zero extent in shape {shape:?}")));
        }
        if numel(&shape) != data.len() {
            return Err(Error::dim(format!(
                "shape {shape:?} holds {} values but {} were provided",
                numel(&shape),
                data.len()
            )));
        }
        Ok(Tensor { shape, data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            data: vec![T::ZERO; numel(shape)],
            shape: shape.to_vec(),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        Tensor {
            data: vec![v; numel(shape)],
            shape: shape.to_vec(),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(v: T) -> Self {
        Tensor { shape: vec![], data: vec![v], requires_grad: false, grad: None }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        Tensor {
            data: (0..numel(shape)).map(&mut f).collect(),
            shape: shape.to_vec(),
            requires_grad: false,
            grad: None,
        }
    }

    /// Uniform in [-1, 1); handy for oracles and property tests.
    pub fn rand_uniform(shape: &[usize], rng: &mut SplitMix64) -> Self {
        Tensor::from_fn(shape, |_| T::from_f64(rng.next_f64() * 2.0 - 1.0))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        numel(&self.shape)
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn is_all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Lossy precision change (f32 <-> f64) preserving shape.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
            requires_grad: self.requires_grad,
            grad: None,
        }
    }

    pub(crate) fn take_data(&mut self) -> Vec<T> {
        std::mem::take(&mut self.data)
    }
}
