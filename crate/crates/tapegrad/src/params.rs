use crate::tape::{Tape, TensorRef};
use crate::tensor::Tensor;

/// Index of a parameter in a [`ParamStore`], stable across the store's life.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(&self) -> usize {
        self.0
    }

    /// Rebuild an id from a store index (used when replaying checkpoints).
    pub fn from_index(index: usize) -> Self {
        ParamId(index)
    }
}

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub tensor: Tensor,
}

/// Ordered collection of named learnable parameters.
///
/// Registration order is the canonical parameter ordering used for
/// checkpoints and gradient vectors, so model construction must register
/// parameters deterministically.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new() }
    }

    pub fn register(&mut self, name: &str, tensor: Tensor) -> ParamId {
        assert!(
            self.entries.iter().all(|e| e.name != name),
            "duplicate parameter name: {name}"
        );
        self.entries.push(ParamEntry { name: name.to_string(), tensor });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn total_elements(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.numel()).sum()
    }

    /// Copy every parameter onto a tape as a differentiable leaf, in
    /// registration order; `refs[id.index()]` is the leaf for `id`.
    pub fn stage(&self, tape: &mut Tape) -> Vec<TensorRef> {
        self.entries.iter().map(|e| tape.leaf(e.tensor.clone())).collect()
    }
}
