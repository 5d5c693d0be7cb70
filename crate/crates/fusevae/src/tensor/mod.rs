//! Dense 64-bit tensors and the reverse-mode graph built on top of them.
//!
//! Everything numeric in this crate runs through [`Graph`]: encoder and
//! decoder networks, Gaussian algebra, losses. Backward passes append new
//! nodes to the same graph instead of writing into side buffers, which makes
//! gradients themselves differentiable (the critic's gradient penalty relies
//! on that) and keeps evaluation order fully deterministic.

mod adam;
mod graph;
#[cfg(test)]
mod graph_tests;
pub(crate) mod kernels;
mod params;

pub use adam::{AdamConfig, AdamState, GradBuffer};
pub use graph::{Grads, Graph, NodeId};
pub use params::{Param, ParamId, ParamStore};

use crate::error::{Error, Result};
use rand::Rng;
use rand_distr::StandardNormal;
use std::sync::Arc;

/// Row-major dense tensor. Cloning shares the buffer; `data_mut` unshares.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::shape(format!("invalid tensor shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} wants {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data: Arc::new(data) })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        assert!(!shape.is_empty() && n > 0, "invalid tensor shape {shape:?}");
        Tensor { shape: shape.to_vec(), data: Arc::new(vec![0.0; n]) }
    }

    pub fn filled(shape: &[usize], v: f64) -> Self {
        let mut t = Tensor::zeros(shape);
        t.data_mut().fill(v);
        t
    }

    /// Scalars are rank-1 tensors of length one.
    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1], data: Arc::new(vec![v]) }
    }

    /// Standard normal draws in row-major order.
    pub fn randn(shape: &[usize], rng: &mut impl Rng) -> Self {
        let n: usize = shape.iter().product();
        assert!(!shape.is_empty() && n > 0, "invalid tensor shape {shape:?}");
        let data: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        Tensor { shape: shape.to_vec(), data: Arc::new(data) }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Vec<f64> {
        Arc::make_mut(&mut self.data)
    }

    /// Zero-copy reshape; the element count must be preserved.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if shape.is_empty() || n != self.numel() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} ({} elems) to {shape:?}",
                self.shape,
                self.numel()
            )));
        }
        Ok(Tensor { shape: shape.to_vec(), data: Arc::clone(&self.data) })
    }

    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        let data: Vec<f64> = self.data.iter().map(|&v| f(v)).collect();
        Tensor { shape: self.shape.clone(), data: Arc::new(data) }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
