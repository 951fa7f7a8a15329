//! Named parameter storage.
//!
//! The model keeps every learnable tensor in one ordered, name-indexed bag.
//! The optimizer, the checkpoint writer, and the finite-difference harness
//! all walk the same structure, so "every parameter group" means the same
//! thing everywhere.

use ndarray::ArrayD;
use std::collections::BTreeMap;

#[derive(Debug, Clone)]
pub struct ParamTensor {
    pub name: String,
    pub values: ArrayD<f64>,
    /// Whether weight decay applies. True for weight matrices/kernels,
    /// false for biases and fusion logits.
    pub decay: bool,
}

#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    tensors: Vec<ParamTensor>,
    index: BTreeMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, values: ArrayD<f64>, decay: bool) {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        self.index.insert(name.clone(), self.tensors.len());
        self.tensors.push(ParamTensor {
            name,
            values,
            decay,
        });
    }

    pub fn get(&self, name: &str) -> &ArrayD<f64> {
        let idx = *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        &self.tensors[idx].values
    }

    pub fn get_mut(&mut self, name: &str) -> &mut ArrayD<f64> {
        let idx = *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        &mut self.tensors[idx].values
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    /// Tensors in registration order.
    pub fn tensors(&self) -> &[ParamTensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [ParamTensor] {
        &mut self.tensors
    }

    /// Accumulate gradients that live in the same structure: `self += other`.
    pub fn add_assign(&mut self, other: &ParamSet) {
        assert_eq!(self.tensors.len(), other.tensors.len());
        for (a, b) in self.tensors.iter_mut().zip(other.tensors.iter()) {
            debug_assert_eq!(a.name, b.name);
            a.values += &b.values;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.tensors.iter_mut() {
            t.values *= factor;
        }
    }

    /// A structurally identical set with all values zero; used for gradient
    /// accumulators and optimizer state.
    pub fn zeros_like(&self) -> ParamSet {
        let mut out = ParamSet::new();
        for t in &self.tensors {
            out.insert(t.name.clone(), ArrayD::zeros(t.values.raw_dim()), t.decay);
        }
        out
    }

    pub fn total_len(&self) -> usize {
        self.tensors.iter().map(|t| t.values.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors
            .iter()
            .all(|t| t.values.iter().all(|v| v.is_finite()))
    }

    /// Flat read access in registration order (used by the gradient suites).
    pub fn flat_get(&self, mut i: usize) -> f64 {
        for t in &self.tensors {
            if i < t.values.len() {
                return t.values.as_slice().unwrap()[i];
            }
            i -= t.values.len();
        }
        panic!("flat index out of range");
    }

    pub fn flat_add(&mut self, mut i: usize, delta: f64) {
        for t in self.tensors.iter_mut() {
            if i < t.values.len() {
                t.values.as_slice_mut().unwrap()[i] += delta;
                return;
            }
            i -= t.values.len();
        }
        panic!("flat index out of range");
    }

    /// Name of the tensor owning flat index `i`.
    pub fn flat_owner(&self, mut i: usize) -> &str {
        for t in &self.tensors {
            if i < t.values.len() {
                return &t.name;
            }
            i -= t.values.len();
        }
        panic!("flat index out of range");
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    #[test]
    fn flat_indexing_walks_registration_order() {
        let mut p = ParamSet::new();
        p.insert("a", ArrayD::from_elem(IxDyn(&[2]), 1.0), true);
        p.insert("b", ArrayD::from_elem(IxDyn(&[3]), 2.0), false);
        assert_eq!(p.total_len(), 5);
        assert_eq!(p.flat_get(0), 1.0);
        assert_eq!(p.flat_get(2), 2.0);
        assert_eq!(p.flat_owner(4), "b");
        p.flat_add(1, 0.5);
        assert_eq!(p.get("a")[[1]], 1.5);
    }
}
