//! Named parameter collections.
//!
//! Insertion order is the canonical order everywhere (optimizer updates,
//! gradient reports, checkpoint layout), which keeps runs bit-reproducible.

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Ordered set of named parameter matrices. Also used for gradients and
/// optimizer moments, which mirror the parameter shapes.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamSet {
    entries: Vec<(String, Matrix)>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn insert(&mut self, name: &str, m: Matrix) {
        assert!(
            self.get(name).is_none(),
            "duplicate parameter name {name}"
        );
        self.entries.push((name.to_string(), m));
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, m)| m)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        self.entries
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, m)| m)
    }

    pub fn require(&self, name: &str) -> Result<&Matrix> {
        self.get(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.entries.iter().map(|(n, m)| (n.as_str(), m))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Matrix)> {
        self.entries.iter_mut().map(|(n, m)| (n.as_str(), m))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar coordinate count across all matrices.
    pub fn total_coords(&self) -> usize {
        self.entries.iter().map(|(_, m)| m.len()).sum()
    }

    /// Same names and shapes, all zeros.
    pub fn zeros_like(&self) -> ParamSet {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|(n, m)| (n.clone(), Matrix::zeros(m.rows(), m.cols())))
                .collect(),
        }
    }
}
