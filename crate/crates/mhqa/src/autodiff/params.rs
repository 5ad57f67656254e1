//! Named parameter tensors with gradient buffers.
//!
//! The store owns the trainable state of a model. Each forward pass binds
//! every parameter onto a fresh tape; after backward, gradients are pulled
//! back into the store by name. Iteration order is the BTreeMap name order,
//! which keeps optimizer updates and serialization deterministic.

use std::collections::BTreeMap;

use super::tape::{Tape, TensorId};
use super::tensor::Tensor;

#[derive(Clone)]
struct Entry {
    value: Tensor,
    grad: Tensor,
}

#[derive(Clone, Default)]
pub struct ParamStore {
    entries: BTreeMap<String, Entry>,
}

/// Name to tape-id map produced by `ParamStore::bind_all`.
pub struct BoundParams {
    ids: BTreeMap<String, TensorId>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> TensorId {
        *self
            .ids
            .get(name)
            .unwrap_or_else(|| panic!("parameter {:?} is not bound", name))
    }

    pub fn ids(&self) -> impl Iterator<Item = (&str, TensorId)> {
        self.ids.iter().map(|(n, id)| (n.as_str(), *id))
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) {
        let grad = Tensor::zeros_like(&value);
        let prev = self.entries.insert(name.to_string(), Entry { value, grad });
        assert!(prev.is_none(), "duplicate parameter name {:?}", name);
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn get(&self, name: &str) -> &Tensor {
        &self
            .entries
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {:?}", name))
            .value
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        &mut self
            .entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {:?}", name))
            .value
    }

    pub fn grad(&self, name: &str) -> &Tensor {
        &self
            .entries
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {:?}", name))
            .grad
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, e)| (n.as_str(), &e.value))
    }

    pub fn param_count(&self) -> usize {
        self.entries.len()
    }

    /// Total number of scalar coordinates across all parameters.
    pub fn coord_count(&self) -> usize {
        self.entries.values().map(|e| e.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for e in self.entries.values_mut() {
            e.grad.fill(0.0);
        }
    }

    pub fn scale_grads(&mut self, factor: f64) {
        for e in self.entries.values_mut() {
            e.grad.scale_assign(factor);
        }
    }

    pub fn accumulate_grad(&mut self, name: &str, delta: &Tensor) {
        self.entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {:?}", name))
            .grad
            .add_assign(delta);
    }

    /// Bind every parameter as a leaf on the tape. All of a variant's
    /// parameters participate in every forward pass, so binding the whole
    /// store keeps gradient accounting complete.
    pub fn bind_all(&self, tape: &mut Tape) -> BoundParams {
        let mut ids = BTreeMap::new();
        for (name, e) in &self.entries {
            ids.insert(name.clone(), tape.bind(name, e.value.clone()));
        }
        BoundParams { ids }
    }

    /// Pull gradients of bound parameters off a consumed tape, adding them
    /// to the store's gradient buffers.
    pub fn accumulate_bound_grads(&mut self, tape: &Tape) {
        for (name, grad) in tape.bound_grads() {
            self.accumulate_grad(name, grad);
        }
    }

    /// In-place perturbation of one coordinate, used by finite differences.
    pub fn nudge(&mut self, name: &str, coord: usize, delta: f64) {
        let v = self.get_mut(name);
        v.data_mut()[coord] += delta;
    }

    /// Apply an update `value += step` for each (name, step) pair.
    pub fn apply_steps(&mut self, steps: &BTreeMap<String, Tensor>) {
        for (name, step) in steps {
            self.get_mut(name).add_assign(step);
        }
    }
}
