//! Named parameter and buffer storage.

use crate::scalar::Scalar;
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry<S> {
    pub name: String,
    pub value: Tensor<S>,
    /// Buffers (running statistics) are stored but never optimized.
    pub trainable: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore<S> {
    entries: Vec<ParamEntry<S>>,
}

/// Tape handles for every store entry, indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Route entry `id` to an existing tape variable.
    pub fn set(&mut self, id: ParamId, var: Var) {
        self.vars[id.0] = var;
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<S>, trainable: bool) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.entries.push(ParamEntry {
            name,
            value,
            trainable,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries
            .iter()
            .position(|e| e.name == name)
            .map(ParamId)
    }

    pub fn entries(&self) -> &[ParamEntry<S>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry<S>] {
        &mut self.entries
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

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.numel())
            .sum()
    }

    /// Put every entry on the tape. Trainable entries become gradient leaves
    /// only when `track` is set.
    pub fn bind(&self, tape: &mut Tape<S>, track: bool) -> BoundParams {
        let vars = self
            .entries
            .iter()
            .map(|e| {
                if track && e.trainable {
                    tape.param(e.value.clone())
                } else {
                    tape.constant(e.value.clone())
                }
            })
            .collect();
        BoundParams { vars }
    }

    /// Gradient per trainable entry (zeros where the loss did not depend on it).
    pub fn collect_grads(
        &self,
        bound: &BoundParams,
        grads: &mut Gradients<S>,
    ) -> Vec<Option<Tensor<S>>> {
        self.entries
            .iter()
            .zip(&bound.vars)
            .map(|(e, &v)| {
                e.trainable.then(|| {
                    grads
                        .take(v)
                        .unwrap_or_else(|| Tensor::zeros(e.value.shape()))
                })
            })
            .collect()
    }
}
