//! Named parameter collections.

use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use crate::error::{contract, Result};
use crate::tensor::Tensor;

/// Ordered mapping from parameter path to tensor. Iteration (and therefore
/// flattening) is lexicographic by path.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamTree {
    entries: BTreeMap<String, Tensor<f64>>,
}

/// Paths and shapes of a [`ParamTree`], without values.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    entries: Vec<(String, Vec<usize>)>,
}

impl Layout {
    pub fn entries(&self) -> &[(String, Vec<usize>)] {
        &self.entries
    }

    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }

    /// Start offset of `path` in the flattened vector.
    pub fn offset(&self, path: &str) -> Option<usize> {
        let mut off = 0;
        for (p, s) in &self.entries {
            if p == path {
                return Some(off);
            }
            off += s.iter().product::<usize>();
        }
        None
    }
}

impl ParamTree {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, path: impl Into<String>, t: Tensor<f64>) -> Option<Tensor<f64>> {
        self.entries.insert(path.into(), t)
    }

    pub fn get(&self, path: &str) -> Option<&Tensor<f64>> {
        self.entries.get(path)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<f64>)> {
        self.entries.iter()
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

    pub fn layout(&self) -> Layout {
        Layout {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), v.shape().to_vec()))
                .collect(),
        }
    }

    /// Same key set and same per-key shapes.
    pub fn is_congruent(&self, other: &ParamTree) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((ka, a), (kb, b))| ka == kb && a.shape() == b.shape())
    }

    pub fn ensure_congruent(&self, other: &ParamTree, what: &str) -> Result<()> {
        if self.is_congruent(other) {
            Ok(())
        } else {
            Err(contract(format!(
                "{what}: parameter trees are not congruent ({} vs {} entries)",
                self.len(),
                other.len()
            )))
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_values());
        for t in self.entries.values() {
            out.extend_from_slice(t.data());
        }
        out
    }

    pub fn from_flat(layout: &Layout, values: &[f64]) -> Result<Self> {
        if values.len() != layout.num_values() {
            return Err(contract(format!(
                "flat vector of length {} for a layout of {} values",
                values.len(),
                layout.num_values()
            )));
        }
        let mut entries = BTreeMap::new();
        let mut off = 0;
        for (path, shape) in &layout.entries {
            let n: usize = shape.iter().product();
            entries.insert(path.clone(), Tensor::new(shape.clone(), values[off..off + n].to_vec())?);
            off += n;
        }
        Ok(ParamTree { entries })
    }

    pub fn zeros_like(&self) -> Self {
        self.map(|_| 0.0)
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Self {
        ParamTree {
            entries: self.entries.iter().map(|(k, v)| (k.clone(), v.map(&mut f))).collect(),
        }
    }

    /// Elementwise combination of two congruent trees.
    pub fn zip_map(&self, other: &ParamTree, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.ensure_congruent(other, "elementwise operation")?;
        let entries = self
            .entries
            .iter()
            .zip(&other.entries)
            .map(|((k, a), (_, b))| {
                let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
                Ok((k.clone(), Tensor::new(a.shape().to_vec(), data)?))
            })
            .collect::<Result<_>>()?;
        Ok(ParamTree { entries })
    }

    pub fn add(&self, other: &ParamTree) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &ParamTree) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|x| x * s)
    }

    /// Prefix every path, e.g. to embed a tree into a larger joint space.
    pub fn prefixed(&self, prefix: &str) -> Self {
        ParamTree {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (format!("{prefix}{k}"), v.clone()))
                .collect(),
        }
    }

    /// Union of two trees with disjoint key sets.
    pub fn merged_with(&self, other: &ParamTree) -> Result<Self> {
        let mut entries = self.entries.clone();
        for (k, v) in &other.entries {
            if entries.insert(k.clone(), v.clone()).is_some() {
                return Err(contract(format!("duplicate parameter path {k}")));
            }
        }
        Ok(ParamTree { entries })
    }

    /// SHA-256 over paths, shapes and little-endian values.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in &self.entries {
            h.update((k.len() as u64).to_le_bytes());
            h.update(k.as_bytes());
            h.update((v.shape().len() as u64).to_le_bytes());
            for &d in v.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for &x in v.data() {
                h.update(x.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

impl FromIterator<(String, Tensor<f64>)> for ParamTree {
    fn from_iter<I: IntoIterator<Item = (String, Tensor<f64>)>>(iter: I) -> Self {
        ParamTree { entries: iter.into_iter().collect() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tree(pairs: &[(&str, Vec<f64>)]) -> ParamTree {
        pairs
            .iter()
            .map(|(k, v)| (k.to_string(), Tensor::new(vec![v.len()], v.clone()).unwrap()))
            .collect()
    }

    #[test]
    fn flattening_is_lexicographic() {
        let t = tree(&[("b", vec![3.0]), ("a", vec![1.0, 2.0])]);
        assert_eq!(t.flatten(), vec![1.0, 2.0, 3.0]);
        assert_eq!(t.layout().offset("b"), Some(2));
        let back = ParamTree::from_flat(&t.layout(), &t.flatten()).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn arithmetic_requires_congruence() {
        let a = tree(&[("a", vec![1.0, 2.0])]);
        let b = tree(&[("a", vec![1.0, 2.0, 3.0])]);
        let c = tree(&[("z", vec![1.0, 2.0])]);
        assert!(a.add(&b).is_err());
        assert!(a.sub(&c).is_err());
        assert_eq!(a.sub(&a).unwrap().flatten(), vec![0.0, 0.0]);
    }

    #[test]
    fn digest_detects_single_value_change() {
        let a = tree(&[("a", vec![1.0, 2.0])]);
        let b = tree(&[("a", vec![1.0, 2.0000000001])]);
        assert_eq!(a.digest(), a.clone().digest());
        assert_ne!(a.digest(), b.digest());
    }
}
