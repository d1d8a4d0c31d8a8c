use std::collections::BTreeMap;

use super::{Graph, NodeId, Scalar, Tensor};
use crate::error::{Error, Result};

/// Named collection of trainable tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet<T: Scalar = f32> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Tensor(format!("unknown parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::Tensor(format!("unknown parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar count.
    pub fn num_elements(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(Tensor::all_finite)
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Copies every tensor into `g` as a parameter leaf.
    pub fn bind(&self, g: &mut Graph<T>) -> BTreeMap<String, NodeId> {
        self.tensors
            .iter()
            .map(|(k, v)| (k.clone(), g.parameter(k, v.clone())))
            .collect()
    }

    /// Copies every tensor into `g` as a constant leaf.
    pub fn bind_frozen(&self, g: &mut Graph<T>) -> BTreeMap<String, NodeId> {
        self.tensors
            .iter()
            .map(|(k, v)| (k.clone(), g.input(v.clone())))
            .collect()
    }

    /// Prefixes every name, for merging several sets into one checkpoint.
    pub fn prefixed(&self, prefix: &str) -> ParamSet<T> {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (format!("{prefix}{k}"), v.clone()))
                .collect(),
        }
    }

    /// Entries whose name starts with `prefix`, with the prefix removed.
    pub fn strip_prefix(&self, prefix: &str) -> ParamSet<T> {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
                .collect(),
        }
    }

    pub fn extend(&mut self, other: ParamSet<T>) {
        self.tensors.extend(other.tensors);
    }
}
