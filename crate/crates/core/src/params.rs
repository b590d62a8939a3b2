use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Named parameter tensors with per-parameter trainable flags.
///
/// Single-writer during training; frozen parameters must remain bit-identical
/// across training steps, which [`ParameterStore::diff_names`] makes checkable.
#[derive(Debug, Clone, Default)]
pub struct ParameterStore {
    entries: BTreeMap<String, Entry>,
}

#[derive(Debug, Clone)]
struct Entry {
    tensor: Tensor,
    trainable: bool,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor, trainable: bool) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::InvalidArg(format!("duplicate parameter `{name}`")));
        }
        self.entries.insert(name.to_string(), Entry { tensor, trainable });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .map(|e| &e.tensor)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn is_trainable(&self, name: &str) -> Result<bool> {
        self.entries
            .get(name)
            .map(|e| e.trainable)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    /// Overwrites the value of a trainable parameter.
    pub fn update(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        let entry = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))?;
        if !entry.trainable {
            return Err(Error::FrozenViolation(name.to_string()));
        }
        if entry.tensor.dims() != tensor.dims() {
            return Err(Error::ShapeMismatch(format!(
                "update of `{name}`: {:?} vs {:?}",
                entry.tensor.dims(),
                tensor.dims()
            )));
        }
        entry.tensor = tensor;
        Ok(())
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<()> {
        self.entries
            .get_mut(name)
            .map(|e| e.trainable = trainable)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    /// Applies a trainable-flag change to every parameter whose name starts
    /// with `prefix`. Returns how many matched.
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) -> usize {
        let mut n = 0;
        for (name, e) in self.entries.iter_mut() {
            if name.starts_with(prefix) {
                e.trainable = trainable;
                n += 1;
            }
        }
        n
    }

    pub fn names_sorted(&self) -> Vec<String> {
        self.entries.keys().cloned().collect()
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.entries
            .iter()
            .filter(|(_, e)| e.trainable)
            .map(|(k, _)| k.clone())
            .collect()
    }

    pub fn num_values(&self) -> usize {
        self.entries.values().map(|e| e.tensor.numel()).sum()
    }

    pub fn num_values_prefix(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, e)| e.tensor.numel())
            .sum()
    }

    /// Names whose tensors differ bitwise between the two stores, plus names
    /// present in only one of them.
    pub fn diff_names(&self, other: &ParameterStore) -> Vec<String> {
        let mut out = Vec::new();
        for (name, e) in &self.entries {
            match other.entries.get(name) {
                Some(o) if e.tensor.bitwise_eq(&o.tensor) => {}
                _ => out.push(name.clone()),
            }
        }
        for name in other.entries.keys() {
            if !self.entries.contains_key(name) {
                out.push(name.clone());
            }
        }
        out.sort();
        out.dedup();
        out
    }
}
