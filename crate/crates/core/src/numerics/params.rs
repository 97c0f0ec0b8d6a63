use indexmap::IndexMap;

use super::{Gradients, Graph, NodeId, Scalar, Tensor};
use crate::error::{Error, Result};

/// Named learnable tensors in insertion order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<F> {
    entries: IndexMap<String, Tensor<F>>,
}

/// Per-parameter gradients keyed by parameter name.
pub type ParamGrads<F> = IndexMap<String, Vec<F>>;

impl<F: Scalar> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        Self {
            entries: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<F>) {
        self.entries.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<F>> {
        self.entries.get_mut(name)
    }

    pub fn expect(&self, name: &str) -> Result<&Tensor<F>> {
        self.get(name)
            .ok_or_else(|| Error::InvalidConfig(format!("missing parameter {name}")))
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<F>> {
        self.entries.shift_remove(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<F>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    pub fn cast<G: Scalar>(&self) -> ParamStore<G> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// Copies every entry of `other` under `prefix`.
    pub fn extend_prefixed(&mut self, prefix: &str, other: &ParamStore<F>) {
        for (k, v) in &other.entries {
            self.entries.insert(format!("{prefix}{k}"), v.clone());
        }
    }

    /// Entries whose names start with `prefix`, with the prefix removed.
    pub fn strip_prefix(&self, prefix: &str) -> ParamStore<F> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.entries.values().all(Tensor::all_finite)
    }
}

/// Lazily places parameters into a [`Graph`] so that each tensor is copied
/// at most once per forward pass, then maps leaf gradients back to names.
pub struct Binder<'a, F> {
    store: &'a ParamStore<F>,
    bound: IndexMap<String, NodeId>,
}

impl<'a, F: Scalar> Binder<'a, F> {
    pub fn new(store: &'a ParamStore<F>) -> Self {
        Self {
            store,
            bound: IndexMap::new(),
        }
    }

    pub fn store(&self) -> &'a ParamStore<F> {
        self.store
    }

    /// Node for parameter `name`. Panics if the store lacks it; model
    /// constructors guarantee the names they later bind.
    pub fn get(&mut self, g: &mut Graph<F>, name: &str) -> NodeId {
        if let Some(&id) = self.bound.get(name) {
            return id;
        }
        let t = self
            .store
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} not in store"));
        let id = g.param(t.clone());
        self.bound.insert(name.to_string(), id);
        id
    }

    pub fn grads(&self, mut grads: Gradients<F>) -> ParamGrads<F> {
        self.bound
            .iter()
            .filter_map(|(k, &id)| grads.take(id).map(|g| (k.clone(), g)))
            .collect()
    }
}

/// `acc += g` for every entry, inserting missing names.
pub fn accumulate<F: Scalar>(acc: &mut ParamGrads<F>, g: &ParamGrads<F>) {
    for (k, v) in g {
        match acc.get_mut(k) {
            Some(a) => a.iter_mut().zip(v).for_each(|(x, &y)| *x += y),
            None => {
                acc.insert(k.clone(), v.clone());
            }
        }
    }
}

pub fn scale_grads<F: Scalar>(g: &mut ParamGrads<F>, k: F) {
    for v in g.values_mut() {
        v.iter_mut().for_each(|x| *x *= k);
    }
}
