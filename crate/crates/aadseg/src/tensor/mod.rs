//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! The engine is define-by-run: a [`Graph`] records every differentiable op
//! executed through it, in execution order (which is already topological),
//! and [`Graph::backward`] replays the record once in reverse. Learnable
//! state lives in a [`ParamSet`]; tensors themselves are immutable values
//! that share their storage via `Arc`.

mod adamw;
mod checkpoint;
mod fd;
mod graph;
pub mod kernels;
mod params;

pub use adamw::{AdamW, AdamWConfig};
pub use checkpoint::{read_checkpoint, write_checkpoint, CheckpointEntry, CHECKPOINT_MAGIC};
pub use fd::{finite_diff_check, finite_diff_check_params, FD_EPS_MAX, FD_EPS_MIN};
pub use graph::Graph;
pub use params::{ParamId, ParamSet};

use crate::error::{Error, Result};
use std::sync::Arc;

/// A dense, row-major, double-precision tensor.
///
/// `node` ties the tensor to the op that produced it on some [`Graph`];
/// tensors with no node are constants and never receive gradients.
#[derive(Clone, Debug)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    node: Option<usize>,
}

impl Tensor {
    /// Builds a tensor, validating the shape/data contract and finiteness.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        if !kernels::all_finite(&data) {
            return Err(Error::NonFinite("tensor construction".into()));
        }
        Ok(Tensor { shape, data: Arc::new(data), node: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: Arc::new(vec![0.0; numel]), node: None }
    }

    pub fn ones(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: Arc::new(vec![1.0; numel]), node: None }
    }

    pub fn scalar(v: f64) -> Result<Self> {
        Tensor::new(vec![1], vec![v])
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

    /// True when the tensor participates in a recorded graph.
    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::NonScalarLoss(self.shape.clone()));
        }
        Ok(self.data[0])
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Arc<Vec<f64>>, node: Option<usize>) -> Self {
        Tensor { shape, data, node }
    }

    pub(crate) fn node(&self) -> Option<usize> {
        self.node
    }

    /// Detach from any recorded graph, keeping the value.
    pub fn detach(&self) -> Tensor {
        Tensor { shape: self.shape.clone(), data: Arc::clone(&self.data), node: None }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_shape_mismatch() {
        assert!(matches!(Tensor::new(vec![2, 3], vec![0.0; 5]), Err(Error::Dimension(_))));
    }

    #[test]
    fn rejects_non_finite() {
        assert!(matches!(
            Tensor::new(vec![2], vec![1.0, f64::NAN]),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn item_requires_single_element() {
        let t = Tensor::ones(vec![2, 2]);
        assert!(t.item().is_err());
        assert_eq!(Tensor::scalar(3.5).unwrap().item().unwrap(), 3.5);
    }
}
