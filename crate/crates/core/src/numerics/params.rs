//! Named parameter storage shared between graphs and optimizers.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;
use crate::scalar::Scalar;

#[derive(Debug, Clone)]
pub struct ParamEntry<T: Scalar> {
    pub name: String,
    pub tensor: Tensor<T>,
}

/// Insertion-ordered parameter table. Iteration order is deterministic and
/// defines optimizer state alignment.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T: Scalar> {
    entries: Vec<ParamEntry<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Insert a trainable parameter. Duplicate names are construction bugs.
    pub fn insert(&mut self, name: &str, mut tensor: Tensor<T>) {
        tensor.set_requires_grad(true);
        self.insert_entry(name, tensor);
    }

    /// Insert non-trainable state (e.g. batch-norm running statistics).
    pub fn insert_state(&mut self, name: &str, mut tensor: Tensor<T>) {
        tensor.set_requires_grad(false);
        self.insert_entry(name, tensor);
    }

    fn insert_entry(&mut self, name: &str, tensor: Tensor<T>) {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter `{name}`"
        );
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push(ParamEntry {
            name: name.to_string(),
            tensor,
        });
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.index
            .get(name)
            .map(|&i| &self.entries[i].tensor)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.entries[i].tensor),
            None => Err(Error::UnknownParam(name.to_string())),
        }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamEntry<T>> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut ParamEntry<T>> {
        self.entries.iter_mut()
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.tensor.zero_grad();
        }
    }

    /// Total element count of trainable parameters.
    pub fn trainable_len(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.tensor.requires_grad())
            .map(|e| e.tensor.numel())
            .sum()
    }

    /// Entries whose name starts with `prefix`, preserving order.
    pub fn subset_by_prefix(&self, prefix: &str) -> ParamStore<T> {
        let mut out = ParamStore::new();
        for e in &self.entries {
            if e.name.starts_with(prefix) {
                let mut t = e.tensor.clone();
                t.zero_grad();
                if e.tensor.requires_grad() {
                    out.insert(&e.name, t);
                } else {
                    out.insert_state(&e.name, t);
                }
            }
        }
        out
    }

    /// Flatten to named tensors (checkpoint form), in store order.
    pub fn to_entries(&self) -> Vec<(String, Tensor<T>)> {
        self.entries
            .iter()
            .map(|e| {
                let mut t = e.tensor.clone();
                t.set_requires_grad(false);
                (e.name.clone(), t)
            })
            .collect()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for e in &self.entries {
            let t = e.tensor.cast::<U>();
            if e.tensor.requires_grad() {
                out.insert(&e.name, t);
            } else {
                out.insert_state(&e.name, t);
            }
        }
        out
    }
}
