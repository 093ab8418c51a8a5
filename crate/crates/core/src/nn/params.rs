use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::Tensor;
use crate::error::{Error, Result};

/// Named tensors, iterated in sorted-name order.
///
/// Used both for model weights and for gradients/optimizer moments keyed
/// identically to them.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
    version: u32,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn version(&self) -> u32 {
        self.version
    }

    pub fn set_version(&mut self, version: u32) {
        self.version = version;
    }

    /// Inserts a new parameter; names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(Error::config(format!("duplicate parameter {name}")));
        }
        self.tensors.insert(name, t);
        Ok(())
    }

    /// Inserts or replaces.
    pub fn put(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::KeyMismatch(format!("missing parameter {name}")))
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.tensors.remove(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    /// Total number of scalar values.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// A store with the same keys and shapes, filled with zeros.
    pub fn zeros_like(&self) -> ParamStore {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
                .collect(),
            version: self.version,
        }
    }

    pub fn same_keys(&self, other: &ParamStore) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((ka, va), (kb, vb))| ka == kb && va.shape() == vb.shape())
    }

    pub fn check_same_keys(&self, other: &ParamStore) -> Result<()> {
        if self.same_keys(other) {
            return Ok(());
        }
        let a: Vec<_> = self.names().collect();
        let b: Vec<_> = other.names().collect();
        let missing: Vec<_> = a.iter().filter(|n| !other.contains(n)).take(3).collect();
        let extra: Vec<_> = b.iter().filter(|n| !self.contains(n)).take(3).collect();
        Err(Error::KeyMismatch(format!(
            "stores differ (missing {missing:?}, extra {extra:?}, or shapes)"
        )))
    }

    /// Global L2 norm over every tensor.
    pub fn global_norm(&self) -> f64 {
        self.tensors
            .values()
            .map(Tensor::sq_norm)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale_in_place(&mut self, s: f64) {
        for t in self.tensors.values_mut() {
            t.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }

    /// `self += s * other`; keys must match.
    pub fn add_scaled(&mut self, other: &ParamStore, s: f64) -> Result<()> {
        self.check_same_keys(other)?;
        for (a, b) in self.tensors.values_mut().zip(other.tensors.values()) {
            a.add_scaled(b, s);
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }

    /// Keeps only parameters whose name satisfies `keep`.
    pub fn retain(&mut self, mut keep: impl FnMut(&str) -> bool) {
        self.tensors.retain(|k, _| keep(k));
    }

    /// Copies every parameter of `other` into `self`, replacing existing ones.
    pub fn merge_from(&mut self, other: &ParamStore) {
        for (k, v) in &other.tensors {
            self.tensors.insert(k.clone(), v.clone());
        }
    }
}

/// Parameter initializers.
pub mod init {
    use super::*;

    pub fn normal(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
        let dist = Normal::new(0.0, std).expect("std must be finite and non-negative");
        let n = shape.iter().product();
        let data = (0..n).map(|_| dist.sample(rng)).collect();
        Tensor::new(shape.to_vec(), data).expect("shape matches data")
    }

    /// Xavier/Glorot-uniform for a `fan_in x fan_out` weight.
    pub fn xavier(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Tensor {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-limit..limit))
            .collect();
        Tensor::matrix(fan_in, fan_out, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut p = ParamStore::new();
        p.insert("a", Tensor::scalar(1.0)).unwrap();
        assert!(p.insert("a", Tensor::scalar(2.0)).is_err());
    }

    #[test]
    fn iteration_is_sorted() {
        let mut p = ParamStore::new();
        for n in ["z.w", "a.b", "m"] {
            p.insert(n, Tensor::scalar(0.0)).unwrap();
        }
        let names: Vec<_> = p.names().collect();
        assert_eq!(names, vec!["a.b", "m", "z.w"]);
    }

    #[test]
    fn global_norm_matches_hand_value() {
        let mut p = ParamStore::new();
        p.insert("a", Tensor::row_vector(vec![3.0])).unwrap();
        p.insert("b", Tensor::row_vector(vec![4.0])).unwrap();
        assert_eq!(p.global_norm(), 5.0);
    }
}
