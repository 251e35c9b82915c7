//! Named parameter tensors with matching gradient accumulators.
//!
//! Each owning model binds a disjoint name prefix (e.g. `vib/k0/...`,
//! `vddib/joint/...`), so one store can hold a whole pipeline. Iteration
//! order is deterministic: sorted by name.

use std::collections::BTreeMap;

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

struct Entry {
    value: Tensor,
    grad: Tensor,
}

#[derive(Default)]
pub struct ParamStore {
    entries: BTreeMap<String, Entry>,
    grads_populated: bool,
}

/// Tape-bound view of a store: every parameter registered as a
/// differentiable leaf, in name order.
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter {} not bound", name))
    }
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    /// Register a parameter; names must be unique.
    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::DuplicateParam(name.to_string()));
        }
        let grad = Tensor::zeros(value.shape().to_vec());
        self.entries.insert(name.to_string(), Entry { value, grad });
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

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .map(|e| &e.value)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn grad(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .map(|e| &e.grad)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn set_value(&mut self, name: &str, value: Tensor) -> Result<()> {
        let e = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        if e.value.shape() != value.shape() {
            return Err(Error::ShapeMismatch(format!(
                "{}: {:?} -> {:?}",
                name,
                e.value.shape(),
                value.shape()
            )));
        }
        e.value = value;
        Ok(())
    }

    /// Names in deterministic (sorted) order.
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, e)| (k.as_str(), &e.value))
    }

    /// Bind every parameter onto `tape` as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        let mut vars = BTreeMap::new();
        for (name, e) in &self.entries {
            vars.insert(name.clone(), tape.param(e.value.clone()));
        }
        BoundParams { vars }
    }

    /// Bind every parameter as a non-differentiable constant (evaluation).
    pub fn bind_frozen(&self, tape: &mut Tape) -> BoundParams {
        let mut vars = BTreeMap::new();
        for (name, e) in &self.entries {
            vars.insert(name.clone(), tape.constant(e.value.clone()));
        }
        BoundParams { vars }
    }

    /// Pull gradients of a backward pass into the accumulators.
    pub fn accumulate_grads(&mut self, bound: &BoundParams, grads: &Gradients) {
        for (name, var) in &bound.vars {
            if let Some(g) = grads.wrt(*var) {
                let e = self.entries.get_mut(name).expect("bound param exists");
                for (a, &b) in e.grad.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
                self.grads_populated = true;
            }
        }
    }

    /// Mark gradients populated without a backward pass (tests).
    pub fn mark_grads_populated(&mut self) {
        self.grads_populated = true;
    }

    pub fn grads_populated(&self) -> bool {
        self.grads_populated
    }

    pub fn zero_grads(&mut self) {
        for e in self.entries.values_mut() {
            e.grad.data_mut().fill(0.0);
        }
        self.grads_populated = false;
    }

    /// Byte-level fingerprint of all parameter values, for determinism and
    /// freezing checks.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for (name, e) in &self.entries {
            for b in name.as_bytes() {
                h = (h ^ *b as u64).wrapping_mul(0x100000001b3);
            }
            for v in e.value.data() {
                for b in v.to_le_bytes() {
                    h = (h ^ b as u64).wrapping_mul(0x100000001b3);
                }
            }
        }
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_duplicate_names() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::from_vec(vec![1.0])).unwrap();
        assert!(store.insert("w", Tensor::from_vec(vec![2.0])).is_err());
    }

    #[test]
    fn grad_buffer_matches_shape() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::matrix(2, 3, vec![0.0; 6]).unwrap()).unwrap();
        assert_eq!(store.grad("w").unwrap().shape(), &[2, 3]);
    }

    #[test]
    fn deterministic_name_order() {
        let mut store = ParamStore::new();
        store.insert("b/x", Tensor::from_vec(vec![0.0])).unwrap();
        store.insert("a/y", Tensor::from_vec(vec![0.0])).unwrap();
        let names: Vec<&str> = store.names().collect();
        assert_eq!(names, vec!["a/y", "b/x"]);
    }

    #[test]
    fn accumulates_backward_grads() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::from_vec(vec![0.5])).unwrap();
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let x = tape.constant(Tensor::from_vec(vec![3.0]));
        let y = tape.mul(bound.var("w"), x);
        let s = tape.sum(y);
        let grads = tape.backward(s);
        store.accumulate_grads(&bound, &grads);
        assert_eq!(store.grad("w").unwrap().data(), &[3.0]);
        assert!(store.grads_populated());
    }
}
