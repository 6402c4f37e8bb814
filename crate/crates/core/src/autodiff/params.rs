use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{hash_str, rng_for};
use crate::tensor::Tensor;

/// How a parameter was (or will be) initialized.
#[derive(Debug, Clone, PartialEq)]
pub enum Init {
    Zero,
    Constant(f64),
    /// Uniform in `[low, high)`, drawn from a stream keyed by `seed` and the path.
    Uniform { low: f64, high: f64, seed: u64 },
    /// Values come from a named bias table (see `geometry::initial_bias_table`).
    BiasTable(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub value: Tensor,
    pub init: Init,
}

/// Named parameters keyed by dot-separated paths, iterated in path order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterStore {
    entries: BTreeMap<String, ParamEntry>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a parameter whose value is generated from `init`.
    ///
    /// `Init::BiasTable` cannot be generated here; use [`ParameterStore::insert`].
    pub fn declare(&mut self, path: &str, shape: &[usize], init: Init) -> Result<()> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match &init {
            Init::Zero => alloc::vec![0.0; n],
            Init::Constant(c) => alloc::vec![*c; n],
            Init::Uniform { low, high, seed } => {
                if !(low < high) {
                    return Err(Error::config(format!("empty uniform range for `{path}`")));
                }
                let mut rng = rng_for(*seed, hash_str(path));
                (0..n).map(|_| rng.random_range(*low..*high)).collect()
            }
            Init::BiasTable(_) => {
                return Err(Error::config(format!(
                    "bias-table parameter `{path}` needs explicit values"
                )))
            }
        };
        self.insert(path, Tensor::new(shape, data)?, init)
    }

    pub fn insert(&mut self, path: &str, value: Tensor, init: Init) -> Result<()> {
        if path.is_empty() {
            return Err(Error::config("empty parameter path"));
        }
        if self.entries.contains_key(path) {
            return Err(Error::config(format!("duplicate parameter `{path}`")));
        }
        self.entries.insert(path.to_string(), ParamEntry { value, init });
        Ok(())
    }

    pub fn get(&self, path: &str) -> Option<&Tensor> {
        self.entries.get(path).map(|e| &e.value)
    }

    pub fn entry(&self, path: &str) -> Option<&ParamEntry> {
        self.entries.get(path)
    }

    pub fn contains(&self, path: &str) -> bool {
        self.entries.contains_key(path)
    }

    /// Replaces a value, keeping its shape.
    pub fn set(&mut self, path: &str, value: Tensor) -> Result<()> {
        let entry = self
            .entries
            .get_mut(path)
            .ok_or_else(|| Error::config(format!("missing parameter `{path}`")))?;
        if entry.value.shape() != value.shape() {
            return Err(Error::shape(
                "parameter",
                format!(
                    "`{path}` has shape {:?}, got {:?}",
                    entry.value.shape(),
                    value.shape()
                ),
            ));
        }
        entry.value = value;
        Ok(())
    }

    pub fn value_mut(&mut self, path: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(path).map(|e| &mut e.value)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn paths(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count across all parameters.
    pub fn num_coordinates(&self) -> usize {
        self.entries.values().map(|e| e.value.len()).sum()
    }
}

/// Gradient per parameter path.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    map: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub(crate) fn from_map(map: BTreeMap<String, Tensor>) -> Self {
        Gradients { map }
    }

    pub fn get(&self, path: &str) -> Option<&Tensor> {
        self.map.get(path)
    }

    pub fn get_mut(&mut self, path: &str) -> Option<&mut Tensor> {
        self.map.get_mut(path)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Euclidean norm over every coordinate.
    pub fn global_norm(&self) -> f64 {
        crate::math::sqrt(
            self.map
                .values()
                .flat_map(|t| t.data().iter())
                .map(|v| v * v)
                .sum(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_init_is_deterministic_and_path_keyed() {
        let mut a = ParameterStore::new();
        let mut b = ParameterStore::new();
        let init = Init::Uniform {
            low: -0.5,
            high: 0.5,
            seed: 9,
        };
        a.declare("w.one", &[4, 4], init.clone()).unwrap();
        a.declare("w.two", &[4, 4], init.clone()).unwrap();
        b.declare("w.one", &[4, 4], init).unwrap();
        assert_eq!(a.get("w.one"), b.get("w.one"));
        assert_ne!(a.get("w.one"), a.get("w.two"));
        assert!(a.get("w.one").unwrap().data().iter().all(|v| (-0.5..0.5).contains(v)));
    }

    #[test]
    fn duplicate_paths_rejected() {
        let mut s = ParameterStore::new();
        s.declare("a", &[1], Init::Zero).unwrap();
        assert!(s.declare("a", &[1], Init::Zero).is_err());
    }

    #[test]
    fn set_checks_shape() {
        let mut s = ParameterStore::new();
        s.declare("a", &[2], Init::Zero).unwrap();
        assert!(s.set("a", Tensor::zeros(&[3])).is_err());
        s.set("a", Tensor::full(&[2], 1.0)).unwrap();
        assert_eq!(s.get("a").unwrap().data(), &[1.0, 1.0]);
    }
}
