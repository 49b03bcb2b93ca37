//! Named parameter store with per-parameter optimizer state.
//!
//! BTreeMap keys give deterministic iteration order everywhere parameters are
//! walked: optimizer updates, checkpoint serialization, gradient checking.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::nn::tensor::Tensor;
use rand::Rng;

/// Gradients keyed by parameter name. Parameters absent from the map are
/// simply not updated (sparse embedding rows rely on this).
pub type Grads = BTreeMap<String, Tensor>;

#[derive(Clone, Debug)]
pub struct Param {
    pub value: Tensor,
    /// First and second Adam moments, lazily allocated on first update.
    pub m: Option<Tensor>,
    pub v: Option<Tensor>,
    /// Number of Adam updates applied; drives bias correction.
    pub step: u64,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a parameter; replaces value and resets optimizer state if the
    /// name already exists.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.entries.insert(
            name.into(),
            Param {
                value,
                m: None,
                v: None,
                step: 0,
            },
        );
    }

    /// Fan-in scaled uniform init: U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    pub fn insert_linear_init(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        fan_in: usize,
        rng: &mut impl Rng,
    ) {
        let limit = 1.0 / (fan_in.max(1) as f32).sqrt();
        self.insert(name, Tensor::rand_uniform(shape, limit, rng));
    }

    pub fn insert_zeros(&mut self, name: impl Into<String>, shape: Vec<usize>) {
        self.insert(name, Tensor::zeros(shape));
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::config(format!("unknown parameter '{name}'")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::config(format!("unknown parameter '{name}'")))
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

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, p)| (k.as_str(), &p.value))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.entries.iter_mut().map(|(k, p)| (k.as_str(), p))
    }

    /// Total number of scalar parameters.
    pub fn n_scalars(&self) -> usize {
        self.entries.values().map(|p| p.value.len()).sum()
    }

    /// Values only, for checkpointing.
    pub fn to_value_map(&self) -> BTreeMap<String, Tensor> {
        self.entries
            .iter()
            .map(|(k, p)| (k.clone(), p.value.clone()))
            .collect()
    }

    /// Rebuilds a store from checkpointed values (fresh optimizer state).
    pub fn from_value_map(values: BTreeMap<String, Tensor>) -> Self {
        let mut store = ParamStore::new();
        for (k, v) in values {
            store.insert(k, v);
        }
        store
    }
}

/// Puts every parameter on the tape as a leaf. Unused leaves cost nothing:
/// they receive no gradient and backward never visits them.
pub fn load_params(tape: &mut crate::nn::Tape, store: &ParamStore) -> BTreeMap<String, crate::nn::Var> {
    store
        .iter()
        .map(|(name, value)| (name.to_string(), tape.leaf(value.clone())))
        .collect()
}

/// Gradients by parameter name; parameters the loss never touched are absent.
pub fn collect_grads(
    pass: &crate::nn::BackwardPass,
    vars: &BTreeMap<String, crate::nn::Var>,
) -> Grads {
    vars.iter()
        .filter_map(|(name, var)| pass.get(*var).map(|g| (name.clone(), g.clone())))
        .collect()
}
