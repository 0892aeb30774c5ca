//! Named learnable parameters and their gradient buffers.

use crate::error::{Error, Result};
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Owns every learnable tensor of a model, keyed by insertion order and name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        let mut value = value;
        value.set_grad(None);
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    /// Records every parameter on `tape`; the returned handles are indexed by
    /// [`ParamId::index`].
    pub fn bind(&self, tape: &mut Tape) -> Result<Vec<Var>> {
        self.ids().map(|id| tape.param(id, self.get(id))).collect()
    }

    /// Adds `scale * grad` into each parameter's gradient buffer, allocating
    /// the buffer on first use.
    pub fn accumulate(&mut self, grads: &Gradients, scale: f64) {
        for (id, g) in grads.params() {
            let t = &mut self.tensors[id.0];
            t.require_grad();
            let buf = t.grad_mut().expect("allocated above");
            buf.iter_mut().zip(g).for_each(|(b, v)| *b += scale * v);
        }
    }

    /// Drops all gradient buffers.
    pub fn clear_grads(&mut self) {
        self.tensors.iter_mut().for_each(|t| t.set_grad(None));
    }

    /// Replaces a parameter's value, keeping its shape.
    pub fn assign(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let slot = &mut self.tensors[id.0];
        if slot.shape() != value.shape() {
            return Err(Error::shape(
                "assign",
                format!(
                    "{}: expected {:?}, got {:?}",
                    self.names[id.0],
                    slot.shape(),
                    value.shape()
                ),
            ));
        }
        let mut value = value;
        value.set_grad(None);
        *slot = value;
        Ok(())
    }

    pub fn total_values(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }
}
