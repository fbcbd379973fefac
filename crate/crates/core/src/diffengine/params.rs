//! Named trainable parameters with gradient slots.

use std::collections::BTreeMap;

use super::Array;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub value: Array,
    pub grad: Array,
}

/// Named flat parameter arrays. Iteration order is the lexicographic order of
/// names, which keeps checkpoints and optimizer state deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, ParamEntry>,
}

/// Gradients produced by one backward sweep, keyed by parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    pub(crate) grads: BTreeMap<String, Array>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Array> {
        self.grads.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array)> {
        self.grads.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Adds `other` into `self`; used for fixed-order reductions.
    pub fn merge(&mut self, other: &Gradients) {
        for (name, g) in &other.grads {
            match self.grads.get_mut(name) {
                Some(acc) => acc.add_assign(g),
                None => {
                    self.grads.insert(name.clone(), g.clone());
                }
            }
        }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array) {
        let grad = Array::zeros(value.rows(), value.cols());
        self.entries.insert(name.into(), ParamEntry { value, grad });
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn value(&self, name: &str) -> Result<&Array> {
        self.entries.get(name).map(|e| &e.value).ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn value_mut(&mut self, name: &str) -> Result<&mut Array> {
        self.entries.get_mut(name).map(|e| &mut e.value).ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn grad(&self, name: &str) -> Result<&Array> {
        self.entries.get(name).map(|e| &e.grad).ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
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

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|e| e.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for e in self.entries.values_mut() {
            e.grad.as_mut_slice().fill(0.0);
        }
    }

    pub fn accumulate(&mut self, grads: &Gradients) -> Result<()> {
        for (name, g) in &grads.grads {
            let e = self.entries.get_mut(name).ok_or_else(|| Error::UnknownParam(name.clone()))?;
            if e.grad.shape() != g.shape() {
                return Err(Error::Shape { op: "accumulate", lhs: e.grad.shape(), rhs: g.shape() });
            }
            e.grad.add_assign(g);
        }
        Ok(())
    }

    /// Euclidean norm of the gradients of the named entries.
    pub fn grad_norm<'a>(&self, names: impl IntoIterator<Item = &'a str>) -> Result<f64> {
        let mut acc = 0.0;
        for n in names {
            acc += self.grad(n)?.as_slice().iter().map(|v| v * v).sum::<f64>();
        }
        Ok(acc.sqrt())
    }

    pub fn grads_finite(&self) -> bool {
        self.entries.values().all(|e| e.grad.all_finite())
    }

    /// Flattened values in name order; paired with [`ParamStore::set_flat`].
    pub fn flat_values(&self) -> Vec<f64> {
        self.entries.values().flat_map(|e| e.value.as_slice().iter().copied()).collect()
    }

    pub fn flat_grads(&self) -> Vec<f64> {
        self.entries.values().flat_map(|e| e.grad.as_slice().iter().copied()).collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_scalars() {
            return Err(Error::invalid(format!(
                "set_flat: expected {} values, got {}",
                self.num_scalars(),
                flat.len()
            )));
        }
        let mut off = 0;
        for e in self.entries.values_mut() {
            let n = e.value.len();
            e.value.as_mut_slice().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grads_clears_everything() {
        let mut p = ParamStore::new();
        p.insert("a", Array::ones(2, 3));
        p.insert("b", Array::scalar(4.0));
        let mut g = Gradients::default();
        g.grads.insert("a".into(), Array::filled(2, 3, 1.5));
        g.grads.insert("b".into(), Array::scalar(-2.0));
        p.accumulate(&g).unwrap();
        p.accumulate(&g).unwrap();
        assert_eq!(p.grad("a").unwrap().as_slice(), &[3.0; 6]);
        p.zero_grads();
        assert!(p.iter().all(|(_, e)| e.grad.as_slice().iter().all(|&v| v == 0.0)));
        for (_, e) in p.iter() {
            assert_eq!(e.grad.shape(), e.value.shape());
        }
    }

    #[test]
    fn accumulate_rejects_wrong_shape_and_unknown_names() {
        let mut p = ParamStore::new();
        p.insert("a", Array::ones(2, 2));
        let mut g = Gradients::default();
        g.grads.insert("a".into(), Array::ones(1, 4));
        assert!(matches!(p.accumulate(&g), Err(Error::Shape { .. })));
        let mut g = Gradients::default();
        g.grads.insert("zzz".into(), Array::ones(1, 1));
        assert!(matches!(p.accumulate(&g), Err(Error::UnknownParam(_))));
    }

    #[test]
    fn flat_round_trip() {
        let mut p = ParamStore::new();
        p.insert("w", Array::from_fn(2, 2, |i, j| (i + 2 * j) as f64));
        p.insert("b", Array::row(&[7.0, 8.0]));
        let flat = p.flat_values();
        assert_eq!(flat.len(), 6);
        let mut q = p.clone();
        q.set_flat(&vec![0.0; 6]).unwrap();
        q.set_flat(&flat).unwrap();
        assert_eq!(p, q);
    }
}
