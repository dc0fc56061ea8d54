//! Labelled feature splits and exact-count rates.

use std::collections::BTreeSet;

use crate::{Error, Result};

/// A set of labelled feature vectors, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    dim: usize,
    features: Vec<f64>,
    labels: Vec<u32>,
}

impl Split {
    pub fn new(dim: usize, features: Vec<f64>, labels: Vec<u32>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("feature dimension must be positive"));
        }
        if features.len() != dim * labels.len() {
            return Err(Error::LengthMismatch {
                expected: dim * labels.len(),
                got: features.len(),
            });
        }
        Ok(Self { dim, features, labels })
    }

    pub fn empty(dim: usize) -> Self {
        Self {
            dim,
            features: Vec::new(),
            labels: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn features_mut(&mut self) -> &mut [f64] {
        &mut self.features
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows_mut(&mut self) -> impl Iterator<Item = &mut [f64]> {
        self.features.chunks_mut(self.dim)
    }

    pub fn push(&mut self, row: &[f64], label: u32) {
        debug_assert_eq!(row.len(), self.dim);
        self.features.extend_from_slice(row);
        self.labels.push(label);
    }

    /// Sorted distinct labels present in the split.
    pub fn label_set(&self) -> Vec<u32> {
        self.labels
            .iter()
            .copied()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    pub fn select(&self, indices: &[usize]) -> Split {
        let mut out = Split::empty(self.dim);
        for &i in indices {
            out.push(self.row(i), self.labels[i]);
        }
        out
    }

    /// Examples whose label is in `keep`.
    pub fn filter_labels(&self, keep: &[u32]) -> Split {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| keep.contains(&self.labels[i])).collect();
        self.select(&idx)
    }

    pub fn concat(&self, other: &Split) -> Result<Split> {
        if self.dim != other.dim {
            return Err(Error::LengthMismatch {
                expected: self.dim,
                got: other.dim,
            });
        }
        let mut out = self.clone();
        out.features.extend_from_slice(&other.features);
        out.labels.extend_from_slice(&other.labels);
        Ok(out)
    }

    /// Content hash of one example (feature bits and label).
    pub fn example_hash(&self, i: usize) -> u64 {
        let mut bytes = Vec::with_capacity(self.dim * 8 + 4);
        for v in self.row(i) {
            bytes.extend_from_slice(&v.to_bits().to_le_bytes());
        }
        bytes.extend_from_slice(&self.labels[i].to_le_bytes());
        crate::store::checksum64(&bytes)
    }
}

/// An exact `count / total` ratio.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Rate {
    pub count: usize,
    pub total: usize,
}

impl Rate {
    pub fn value(self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.count as f64 / self.total as f64
        }
    }

    /// `1 − self`, exact.
    pub fn complement(self) -> Rate {
        Rate {
            count: self.total - self.count,
            total: self.total,
        }
    }
}
