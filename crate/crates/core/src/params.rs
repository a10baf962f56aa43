//! Named model state: trainable tensors plus batchnorm running statistics.

use std::sync::Arc;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{BatchStats, Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamKind {
    /// Updated by the optimizer.
    Trainable,
    /// Running statistics; updated only by train-mode forward passes.
    Buffer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry<T: Element> {
    pub tensor: Arc<Tensor<T>>,
    pub kind: ParamKind,
}

/// Ordered map from dotted names (`encoder.block3.expand.weight`) to tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T: Element = f32> {
    entries: IndexMap<String, Entry<T>>,
}

impl<T: Element> Default for ParamStore<T> {
    fn default() -> Self {
        Self {
            entries: IndexMap::new(),
        }
    }
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>, kind: ParamKind) {
        self.entries.insert(
            name.into(),
            Entry {
                tensor: Arc::new(tensor),
                kind,
            },
        );
    }

    pub fn insert_param(&mut self, name: impl Into<String>, tensor: Tensor<T>) {
        self.insert(name, tensor, ParamKind::Trainable);
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, tensor: Tensor<T>) {
        self.insert(name, tensor, ParamKind::Buffer);
    }

    pub fn get(&self, name: &str) -> Option<&Arc<Tensor<T>>> {
        self.entries.get(name).map(|e| &e.tensor)
    }

    pub fn entry(&self, name: &str) -> Option<&Entry<T>> {
        self.entries.get(name)
    }

    pub fn tensor(&self, name: &str) -> Result<&Arc<Tensor<T>>> {
        self.get(name).ok_or_else(|| Error::MissingKey(name.to_string()))
    }

    pub fn tensor_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.entries
            .get_mut(name)
            .map(|e| Arc::make_mut(&mut e.tensor))
            .ok_or_else(|| Error::MissingKey(name.to_string()))
    }

    /// Replace a tensor, keeping its kind; the shape must match.
    pub fn set(&mut self, name: &str, tensor: Tensor<T>) -> Result<()> {
        let entry = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::MissingKey(name.to_string()))?;
        if entry.tensor.shape() != tensor.shape() {
            return Err(Error::TensorShape {
                name: name.to_string(),
                expected: entry.tensor.shape(),
                got: tensor.shape(),
            });
        }
        entry.tensor = Arc::new(tensor);
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Entry<T>)> {
        self.entries.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn trainable(&self) -> impl Iterator<Item = (&String, &Arc<Tensor<T>>)> {
        self.entries
            .iter()
            .filter(|(_, e)| e.kind == ParamKind::Trainable)
            .map(|(k, e)| (k, &e.tensor))
    }

    /// Element count of trainable tensors.
    pub fn trainable_count(&self) -> usize {
        self.trainable().map(|(_, t)| t.len()).sum()
    }

    /// Element count of running-statistics buffers.
    pub fn buffer_count(&self) -> usize {
        self.entries
            .values()
            .filter(|e| e.kind == ParamKind::Buffer)
            .map(|e| e.tensor.len())
            .sum()
    }

    /// Fold train-mode batch statistics into the running averages of the
    /// batchnorm layers they came from (keyed by layer prefix).
    pub fn apply_bn_updates(&mut self, updates: &[(String, BatchStats<T>)], momentum: f64) -> Result<()> {
        for (prefix, stats) in updates {
            let mean_key = format!("{prefix}.running_mean");
            let var_key = format!("{prefix}.running_var");
            let mut mean = (**self.tensor(&mean_key)?).clone();
            let mut var = (**self.tensor(&var_key)?).clone();
            stats.update_running(&mut mean, &mut var, momentum);
            self.set(&mean_key, mean)?;
            self.set(&var_key, var)?;
        }
        Ok(())
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(k, e)| {
                    (
                        k.clone(),
                        Entry {
                            tensor: Arc::new(e.tensor.cast()),
                            kind: e.kind,
                        },
                    )
                })
                .collect(),
        }
    }
}
