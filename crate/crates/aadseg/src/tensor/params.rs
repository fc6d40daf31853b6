use super::kernels;
use crate::error::{Error, Result};
use std::sync::Arc;

/// Handle to one named parameter inside a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
pub(crate) struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Arc<Vec<f64>>,
    pub grad: Option<Vec<f64>>,
}

/// Owned storage for every learnable parameter of a model, in creation
/// order. Gradients accumulate here during [`super::Graph::backward`] and
/// are consumed by the optimizer.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    entries: Vec<ParamEntry>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    /// Registers a parameter. Names must be unique; they key the checkpoint
    /// container.
    pub fn add(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Result<ParamId> {
        let name = name.into();
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension(format!(
                "param {name}: shape {shape:?} implies {numel} elements, got {}",
                data.len()
            )));
        }
        if !kernels::all_finite(&data) {
            return Err(Error::NonFinite(format!("param {name}")));
        }
        if self.entries.iter().any(|e| e.name == name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        self.entries.push(ParamEntry { name, shape, value: Arc::new(data), grad: None });
        Ok(ParamId(self.entries.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn shape(&self, id: ParamId) -> &[usize] {
        &self.entries[id.0].shape
    }

    pub fn value(&self, id: ParamId) -> &[f64] {
        &self.entries[id.0].value
    }

    pub(crate) fn value_arc(&self, id: ParamId) -> &Arc<Vec<f64>> {
        &self.entries[id.0].value
    }

    /// Gradient accumulated since the last [`ParamSet::clear_grads`], if any.
    pub fn grad(&self, id: ParamId) -> Option<&[f64]> {
        self.entries[id.0].grad.as_deref()
    }

    /// Replace a parameter value (same shape).
    pub fn set_value(&mut self, id: ParamId, data: Vec<f64>) -> Result<()> {
        let entry = &mut self.entries[id.0];
        if data.len() != entry.value.len() {
            return Err(Error::Dimension(format!(
                "param {}: value length {} != {}",
                entry.name,
                data.len(),
                entry.value.len()
            )));
        }
        if !kernels::all_finite(&data) {
            return Err(Error::NonFinite(format!("param {}", entry.name)));
        }
        entry.value = Arc::new(data);
        Ok(())
    }

    /// Mutable access for in-place optimizer updates. Clones the buffer only
    /// if a forward pass still holds a reference to it.
    pub(crate) fn value_mut(&mut self, id: ParamId) -> &mut Vec<f64> {
        Arc::make_mut(&mut self.entries[id.0].value)
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, contribution: &[f64]) {
        let entry = &mut self.entries[id.0];
        match &mut entry.grad {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(contribution) {
                    *a += b;
                }
            }
            None => entry.grad = Some(contribution.to_vec()),
        }
    }

    /// Drop all accumulated gradients (they become absent, not zero).
    pub fn clear_grads(&mut self) {
        for e in &mut self.entries {
            e.grad = None;
        }
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    /// Sum of squared gradient entries for one parameter; 0.0 when absent.
    pub fn grad_sq_norm(&self, id: ParamId) -> f64 {
        match &self.entries[id.0].grad {
            Some(g) => g.iter().map(|v| v * v).sum(),
            None => 0.0,
        }
    }
}
