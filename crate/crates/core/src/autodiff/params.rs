use super::graph::{Gradients, Graph, Var};
use super::tensor::Tensor;
use crate::error::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub tensor: Tensor,
    pub trainable: bool,
    /// Whether decoupled weight decay applies (matrices yes, norm affines no).
    pub decay: bool,
}

/// Ordered, named collection of parameter tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor, decay: bool) -> usize {
        self.entries.push(ParamEntry { name: name.into(), tensor, trainable: true, decay });
        self.entries.len() - 1
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.entries[i].tensor)
    }

    pub fn tensor(&self, index: usize) -> &Tensor {
        &self.entries[index].tensor
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.numel()).sum()
    }

    pub fn num_trainable(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.tensor.numel()).sum()
    }

    /// Adds every entry to `g`: trainable entries as leaves, frozen ones as
    /// constants. The returned handles are index-aligned with the store.
    pub fn bind(&self, g: &mut Graph) -> Result<Vec<Var>> {
        self.entries
            .iter()
            .map(|e| if e.trainable { g.leaf(e.tensor.clone()) } else { g.constant(e.tensor.clone()) })
            .collect()
    }

    /// Per-entry gradients, zeros for frozen entries.
    pub fn collect_grads(&self, grads: &Gradients, vars: &[Var]) -> Vec<Tensor> {
        self.entries
            .iter()
            .zip(vars)
            .map(|(e, &v)| if e.trainable { grads.wrt(v) } else { Tensor::zeros(e.tensor.shape()) })
            .collect()
    }
}
