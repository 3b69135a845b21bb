use std::collections::BTreeMap;

use rand::Rng;

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
struct Entry {
    value: Tensor,
    grad: Option<Tensor>,
}

/// Named parameters with one gradient accumulator each.
///
/// Names iterate in sorted order, which makes checkpoints and optimizer
/// updates independent of registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Entry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::DuplicateParameter(name));
        }
        self.entries.insert(name, Entry { value, grad: None });
        Ok(())
    }

    /// Registers a weight matrix `fan_in x fan_out` drawn uniformly from
    /// `±sqrt(6 / (fan_in + fan_out))`.
    pub fn insert_glorot<R: Rng>(
        &mut self,
        name: impl Into<String>,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Result<()> {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-limit..=limit))
            .collect();
        self.insert(name, Tensor::matrix(fan_in, fan_out, data)?)
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
        self.entries.keys().map(String::as_str)
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .map(|e| &e.value)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn value_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(name)
            .map(|e| &mut e.value)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn grad(&self, name: &str) -> Result<Option<&Tensor>> {
        self.entries
            .get(name)
            .map(|e| e.grad.as_ref())
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    /// Sets every gradient accumulator to zeros of the parameter's shape.
    pub fn zero_grad(&mut self) {
        for e in self.entries.values_mut() {
            e.grad = Some(Tensor::zeros(e.value.shape()));
        }
    }

    /// Drops all accumulators; a subsequent optimizer step fails until they
    /// are repopulated.
    pub fn clear_grad(&mut self) {
        for e in self.entries.values_mut() {
            e.grad = None;
        }
    }

    pub fn accumulate(&mut self, name: &str, grad: &Tensor) -> Result<()> {
        let e = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))?;
        if grad.len() != e.value.len() {
            return Err(Error::dim("accumulate", e.value.shape(), grad.shape()));
        }
        match &mut e.grad {
            Some(g) => g.add_assign(grad),
            None => e.grad = Some(grad.clone().reshaped(e.value.shape())?),
        }
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, e)| (k.as_str(), &e.value))
    }

    pub(crate) fn iter_mut_with_grad(
        &mut self,
    ) -> impl Iterator<Item = (&str, &mut Tensor, Option<&Tensor>)> {
        self.entries
            .iter_mut()
            .map(|(k, e)| (k.as_str(), &mut e.value, e.grad.as_ref()))
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|e| e.value.len()).sum()
    }

    /// Copies parameter values from `other` for every shared name.
    pub fn copy_values_from(&mut self, other: &ParamStore) -> Result<()> {
        for (name, e) in &mut self.entries {
            let src = other.value(name)?;
            if src.shape() != e.value.shape() {
                return Err(Error::dim("copy_values_from", e.value.shape(), src.shape()));
            }
            e.value = src.clone();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn glorot_respects_limit() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        store.insert_glorot("w", 10, 6, &mut rng).unwrap();
        let limit = (6.0f64 / 16.0).sqrt();
        assert!(store.value("w").unwrap().data().iter().all(|v| v.abs() <= limit));
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::new();
        store.insert("a", Tensor::scalar(1.0)).unwrap();
        assert!(matches!(
            store.insert("a", Tensor::scalar(2.0)),
            Err(Error::DuplicateParameter(_))
        ));
    }

    #[test]
    fn gradients_accumulate_until_zeroed() {
        let mut store = ParamStore::new();
        store.insert("a", Tensor::vector(vec![1.0, 2.0]).unwrap()).unwrap();
        let g = Tensor::vector(vec![0.5, 1.0]).unwrap();
        store.accumulate("a", &g).unwrap();
        store.accumulate("a", &g).unwrap();
        assert_eq!(store.grad("a").unwrap().unwrap().data(), &[1.0, 2.0]);
        store.zero_grad();
        assert_eq!(store.grad("a").unwrap().unwrap().data(), &[0.0, 0.0]);
    }
}
