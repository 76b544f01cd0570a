use std::collections::{BTreeMap, BTreeSet};

use sha2::{Digest, Sha256};

use super::{NumericsError, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub tensor: Tensor,
    pub trainable: bool,
}

/// Named model parameters. Iteration order is lexicographic by name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterStore {
    entries: BTreeMap<String, ParamEntry>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(
        &mut self,
        name: impl Into<String>,
        tensor: Tensor,
        trainable: bool,
    ) -> Result<(), NumericsError> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(NumericsError::DuplicateParam(name));
        }
        self.entries.insert(name, ParamEntry { tensor, trainable });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name).map(|e| &e.tensor)
    }

    pub fn entry(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    /// Mutable view of a parameter's values. The shape cannot change.
    pub fn values_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        self.entries.get_mut(name).map(|e| e.tensor.data_mut())
    }

    /// Replaces a parameter's values; the new tensor must have the same shape.
    pub fn set(&mut self, name: &str, tensor: Tensor) -> Result<(), NumericsError> {
        let entry = self
            .entries
            .get_mut(name)
            .ok_or_else(|| NumericsError::UnknownParam(name.to_string()))?;
        if entry.tensor.shape() != tensor.shape() {
            return Err(NumericsError::ParamShape {
                name: name.to_string(),
                expected: entry.tensor.shape().to_vec(),
                got: tensor.shape().to_vec(),
            });
        }
        entry.tensor = tensor;
        Ok(())
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<(), NumericsError> {
        self.entries
            .get_mut(name)
            .map(|e| e.trainable = trainable)
            .ok_or_else(|| NumericsError::UnknownParam(name.to_string()))
    }

    /// Marks exactly the given names trainable and freezes everything else.
    pub fn apply_mask(&mut self, mask: &BTreeSet<String>) -> Result<(), NumericsError> {
        if let Some(unknown) = mask.iter().find(|n| !self.entries.contains_key(*n)) {
            return Err(NumericsError::UnknownParam(unknown.clone()));
        }
        for (name, entry) in &mut self.entries {
            entry.trainable = mask.contains(name);
        }
        Ok(())
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.entries.get(name).is_some_and(|e| e.trainable)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn trainable_names(&self) -> BTreeSet<String> {
        self.entries
            .iter()
            .filter(|(_, e)| e.trainable)
            .map(|(n, _)| n.clone())
            .collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry)> {
        self.entries.iter().map(|(n, e)| (n.as_str(), e))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|e| e.tensor.len()).sum()
    }

    /// SHA-256 over names, shapes and the little-endian bytes of every value.
    pub fn blob_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for (name, entry) in &self.entries {
            hasher.update(name.as_bytes());
            hasher.update([0u8]);
            for d in entry.tensor.shape() {
                hasher.update((*d as u64).to_le_bytes());
            }
            for v in entry.tensor.data() {
                hasher.update(v.to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }
}
