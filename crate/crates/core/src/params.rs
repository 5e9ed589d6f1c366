//! Named parameter collections.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{GradMap, Tensor};

/// Parameters keyed by dotted name (`backbone.enc0.conv1.weight`,
/// `head.<task>.bias`, ...). Iteration order is the sorted key order, which
/// fixes every reduction and serialization order downstream.
///
/// `Clone` is a deep copy: adapted copies never share storage with the base.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Option<Tensor<T>> {
        self.tensors.insert(name.into(), value)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<T>> {
        self.tensors.remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar coordinates.
    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// `θ ← θ − lr·g` for every gradient present.
    pub fn sgd_step(&mut self, grads: &GradMap<T>, lr: T) -> Result<()> {
        for (name, g) in grads {
            let p = self.get_mut(name)?;
            if p.shape() != g.shape() {
                return Err(Error::shape(
                    "sgd_step",
                    format!("{name}: param {:?} vs grad {:?}", p.shape(), g.shape()),
                ));
            }
            for (w, &d) in p.data_mut().iter_mut().zip(g.data()) {
                *w -= lr * d;
            }
        }
        Ok(())
    }

    /// Largest coordinate difference; errors if the key sets or shapes differ.
    pub fn max_abs_diff(&self, other: &ParamSet<T>) -> Result<T> {
        if self.tensors.len() != other.tensors.len() {
            return Err(Error::Contract("parameter sets have different keys".into()));
        }
        let mut m = T::zero();
        for (name, t) in &self.tensors {
            m = m.max(t.max_abs_diff(other.get(name)?)?);
        }
        Ok(m)
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }
}

impl<T> FromIterator<(String, Tensor<T>)> for ParamSet<T> {
    fn from_iter<I: IntoIterator<Item = (String, Tensor<T>)>>(iter: I) -> Self {
        ParamSet {
            tensors: iter.into_iter().collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clone_is_storage_independent() {
        let mut a = ParamSet::<f64>::new();
        a.insert("w", Tensor::full(&[2], 1.0));
        let mut b = a.clone();
        b.get_mut("w").unwrap().data_mut()[0] = 5.0;
        assert_eq!(a.get("w").unwrap().data(), &[1.0, 1.0]);
        assert_eq!(a.max_abs_diff(&b).unwrap(), 4.0);
    }

    #[test]
    fn sgd_step_only_touches_given_keys() {
        let mut p = ParamSet::<f64>::new();
        p.insert("a", Tensor::full(&[1], 1.0));
        p.insert("b", Tensor::full(&[1], 1.0));
        let mut g = GradMap::new();
        g.insert("a".to_string(), Tensor::full(&[1], 2.0));
        p.sgd_step(&g, 0.5).unwrap();
        assert_eq!(p.get("a").unwrap().data(), &[0.0]);
        assert_eq!(p.get("b").unwrap().data(), &[1.0]);
    }
}
