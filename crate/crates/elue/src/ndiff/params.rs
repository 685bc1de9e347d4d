use std::collections::BTreeMap;

use rand::Rng;

use super::Tensor;
use crate::{Error, Result};

/// Gradients keyed by parameter name. `BTreeMap` keeps iteration order
/// deterministic.
pub type Grads = BTreeMap<String, Tensor>;

/// One named parameter plus its Adam state.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub value: Tensor,
    /// First-moment estimate, same shape as `value`.
    pub m: Tensor,
    /// Second-moment estimate, same shape as `value`.
    pub v: Tensor,
    pub step: u64,
}

impl ParamEntry {
    fn new(value: Tensor) -> Self {
        let m = Tensor::zeros(value.shape().to_vec());
        let v = Tensor::zeros(value.shape().to_vec());
        ParamEntry {
            value,
            m,
            v,
            step: 0,
        }
    }
}

/// Named collection of parameters with per-entry optimizer state.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterSet {
    entries: BTreeMap<String, ParamEntry>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.entries.insert(name.into(), ParamEntry::new(value));
    }

    pub fn insert_entry(&mut self, name: impl Into<String>, entry: ParamEntry) {
        self.entries.insert(name.into(), entry);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name).map(|e| &e.value)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter `{name}`")))
    }

    pub fn entry(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.get(name)
    }

    pub fn entry_mut(&mut self, name: &str) -> Option<&mut ParamEntry> {
        self.entries.get_mut(name)
    }

    pub fn set_value(&mut self, name: &str, value: Tensor) -> Result<()> {
        let entry = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter `{name}`")))?;
        if entry.value.shape() != value.shape() {
            return Err(Error::shape(
                format!("ParameterSet::set_value `{name}`"),
                format!("{:?}", entry.value.shape()),
                format!("{:?}", value.shape()),
            ));
        }
        entry.value = value;
        Ok(())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut ParamEntry)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_values(&self) -> usize {
        self.entries.values().map(|e| e.value.numel()).sum()
    }

    /// Fill every value tensor with uniform(-scale, scale) noise. Used by
    /// tests that need "randomized" parameter sets.
    pub fn randomize(&mut self, scale: f64, rng: &mut impl Rng) {
        for entry in self.entries.values_mut() {
            for v in entry.value.values_mut() {
                *v = rng.random_range(-scale..scale);
            }
        }
    }
}
