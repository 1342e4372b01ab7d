use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Named tensors keyed by dotted path (`large.layer0.wq`). The trainable flag
/// of an entry is its tensor's `requires_grad`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, mut tensor: Tensor, trainable: bool) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::contract(format!("duplicate parameter {name}")));
        }
        tensor.requires_grad = trainable;
        tensor.grad = None;
        self.entries.insert(name, tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::contract(format!("missing parameter {name}")))
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

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        for t in self.entries.values_mut() {
            t.requires_grad = trainable;
            if !trainable {
                t.grad = None;
            }
        }
    }

    pub fn num_trainable(&self) -> usize {
        self.entries
            .values()
            .filter(|t| t.requires_grad)
            .map(Tensor::numel)
            .sum()
    }

    pub fn num_elements(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    /// Adds tape gradients into matching trainable entries. Names that belong
    /// to other stores, and frozen entries, are skipped.
    pub fn accumulate_grads(&mut self, grads: &[(String, Vec<f64>)]) {
        for (name, g) in grads {
            let Some(t) = self.entries.get_mut(name) else {
                continue;
            };
            if !t.requires_grad {
                continue;
            }
            match &mut t.grad {
                Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
                None => t.grad = Some(g.clone()),
            }
        }
    }

    /// Gives every trainable entry without a gradient an explicit zero one,
    /// for parameters the loss never reached.
    pub fn fill_missing_grads(&mut self) {
        for t in self.entries.values_mut() {
            if t.requires_grad && t.grad.is_none() {
                t.grad = Some(vec![0.0; t.numel()]);
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for t in self.entries.values_mut() {
            t.grad = None;
        }
    }

    /// Moves every entry of `other` into `self`.
    pub fn merge(&mut self, other: ParamStore) -> Result<()> {
        for (k, v) in other.entries {
            let trainable = v.requires_grad;
            self.insert(k, v, trainable)?;
        }
        Ok(())
    }

    /// Entries whose name starts with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamStore {
        ParamStore {
            entries: self
                .entries
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Bitwise comparison of values (ignores gradients and flags).
    pub fn values_equal(&self, other: &ParamStore) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|((ka, a), (kb, b))| {
                ka == kb
                    && a.shape() == b.shape()
                    && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}
