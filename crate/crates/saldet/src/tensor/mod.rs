//! Dense 64-bit tensors and the reverse-mode tape they compute on.
//!
//! Everything downstream (encoder, fusion, losses) is built from the small
//! op vocabulary recorded here. Values are row-major; image batches use
//! NCHW layout. Gradients are exact reverse-mode derivatives, checked
//! elsewhere against central finite differences.

mod ops;
mod tape;

pub use tape::{Tape, TensorId, BCE_CLAMP};

use crate::error::TensorError;

/// Ordered (name, tape handle) pairs for every trainable tensor a model
/// registered on a tape; the optimizer walks this to pull gradients.
pub type Binding = Vec<(String, TensorId)>;

/// Dense n-dimensional array of 64-bit reals, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    values: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

impl Tensor {
    pub fn from_vec(dims: Vec<usize>, values: Vec<f64>) -> Result<Self, TensorError> {
        let expect: usize = dims.iter().product();
        if expect != values.len() {
            return Err(TensorError::LengthMismatch { dims, len: values.len() });
        }
        Ok(Tensor { dims, values, grad: None, requires_grad: false })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        let n = dims.iter().product();
        Tensor { dims: dims.to_vec(), values: vec![0.0; n], grad: None, requires_grad: false }
    }

    pub fn full(dims: &[usize], v: f64) -> Self {
        let n = dims.iter().product();
        Tensor { dims: dims.to_vec(), values: vec![v; n], grad: None, requires_grad: false }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { dims: vec![1], values: vec![v], grad: None, requires_grad: false }
    }

    /// Marks the tensor as a trainable leaf; the tape will fill `grad`.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub(crate) fn set_grad(&mut self, g: Vec<f64>) {
        debug_assert_eq!(g.len(), self.values.len());
        self.grad = Some(g);
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Interprets the tensor as an NCHW batch.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize), TensorError> {
        match self.dims.as_slice() {
            &[n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(TensorError::RankMismatch { expected: 4, dims: self.dims.clone() }),
        }
    }
}

pub(crate) fn dims_product(dims: &[usize]) -> usize {
    dims.iter().product()
}
