//! Reverse-mode autodiff tensor engine.
//!
//! A [`Tensor`] is an n-dimensional array of `f64` in row-major order. Ops
//! live on a [`Tape`]: running an op through a tape records what is needed
//! for the backward pass whenever a gradient leaf participates. Tensors that
//! never touch a gradient leaf carry no tape state and behave as plain
//! values.

pub mod adam;
pub mod fbtn;
pub mod fdcheck;
pub mod imgproc;
pub(crate) mod kernels;
pub mod tape;

pub use adam::AdamState;
pub use tape::{Gradients, Tape};

use std::sync::Arc;

use crate::error::{Error, Result};

/// Reference to a node on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeRef {
    pub(crate) tape_id: u64,
    pub(crate) index: usize,
}

/// N-dimensional `f64` array, row-major. Cloning is cheap (shared storage).
#[derive(Clone, Debug)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    node: Option<NodeRef>,
}

impl Tensor {
    /// Build a tensor from raw data. Fails if the element count does not
    /// match the shape or any element is non-finite.
    pub fn from_vec(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric("tensor construction saw NaN/Inf".into()));
        }
        Ok(Self::from_parts(Arc::new(data), shape.to_vec(), None))
    }

    pub fn scalar(v: f64) -> Self {
        Self::from_parts(Arc::new(vec![v]), Vec::new(), None)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Self::from_parts(Arc::new(vec![0.0; numel]), shape.to_vec(), None)
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        let numel: usize = shape.iter().product();
        Self::from_parts(Arc::new(vec![v; numel]), shape.to_vec(), None)
    }

    pub(crate) fn from_parts(data: Arc<Vec<f64>>, shape: Vec<usize>, node: Option<NodeRef>) -> Self {
        Tensor { shape, data, node }
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

    pub(crate) fn data_arc(&self) -> Arc<Vec<f64>> {
        Arc::clone(&self.data)
    }

    /// Whether this tensor participates in gradient flow on some tape.
    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    pub(crate) fn node(&self) -> Option<NodeRef> {
        self.node
    }

    /// Same values, detached from any tape.
    pub fn detach(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
            node: None,
        }
    }

    /// Extract the value of a scalar tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    /// Reinterpret with a new shape of identical element count. Detached
    /// reshapes only; on-tape reshape goes through [`Tape::reshape`].
    pub fn reshaped(&self, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(Error::Dimension(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::clone(&self.data),
            node: None,
        })
    }

    /// Elementwise map producing a detached tensor.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        let data: Vec<f64> = self.data.iter().map(|&v| f(v)).collect();
        Tensor::from_parts(Arc::new(data), self.shape.clone(), None)
    }

    /// Interpret as an image-like (channels, height, width) shape. Rank-2
    /// tensors are treated as single-channel.
    pub fn chw(&self) -> Result<(usize, usize, usize)> {
        match self.shape.len() {
            2 => Ok((1, self.shape[0], self.shape[1])),
            3 => Ok((self.shape[0], self.shape[1], self.shape[2])),
            _ => Err(Error::Dimension(format!(
                "expected rank 2 or 3 image tensor, got shape {:?}",
                self.shape
            ))),
        }
    }
}

pub(crate) fn same_shape(a: &Tensor, b: &Tensor, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!(
            "{op}: shape {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_shape() {
        assert!(Tensor::from_vec(vec![1.0, 2.0], &[3]).is_err());
        let t = Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]).unwrap();
        assert_eq!(t.numel(), 6);
    }

    #[test]
    fn from_vec_rejects_non_finite() {
        assert!(Tensor::from_vec(vec![f64::NAN], &[1]).is_err());
        assert!(Tensor::from_vec(vec![f64::INFINITY], &[1]).is_err());
    }

    #[test]
    fn scalar_item() {
        assert_eq!(Tensor::scalar(4.25).item().unwrap(), 4.25);
        assert!(Tensor::zeros(&[2]).item().is_err());
    }

    #[test]
    fn reshape_preserves_data() {
        let t = Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0], &[4]).unwrap();
        let r = t.reshaped(&[2, 2]).unwrap();
        assert_eq!(r.data(), t.data());
        assert!(t.reshaped(&[3]).is_err());
    }
}
