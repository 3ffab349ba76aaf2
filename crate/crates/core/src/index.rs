//! Exact inner-product index over expert descriptors.
//!
//! Keys and queries are unit vectors, so inner product is cosine similarity.
//! Search is exhaustive; ties resolve to the lower row (pool) index.

use alloc::string::String;
use alloc::vec::Vec;
use core::cmp::Ordering;

use crate::descriptors::{Descriptor, UNIT_TOLERANCE};
use crate::error::{Error, Result};
use crate::linalg::{dot, norm};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    /// Row of the index, which is the expert's pool index when the index was
    /// built from the full pool.
    pub index: usize,
    pub similarity: f64,
}

/// Descending similarity, then ascending row.
fn rank(a: &Neighbor, b: &Neighbor) -> Ordering {
    b.similarity.total_cmp(&a.similarity).then(a.index.cmp(&b.index))
}

/// Immutable flat index; safe to share across threads.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatIndex {
    dim: usize,
    ids: Vec<String>,
    keys: Vec<f64>,
}

impl FlatIndex {
    pub fn build(descriptors: &[Descriptor]) -> Result<Self> {
        let first = descriptors.first().ok_or(Error::EmptyPool)?;
        let dim = first.dim();
        let mut keys = Vec::with_capacity(descriptors.len() * dim);
        for (i, d) in descriptors.iter().enumerate() {
            if d.dim() != dim {
                return Err(Error::DimensionMismatch { context: "index key", expected: dim, found: d.dim() });
            }
            let n = norm(&d.vector);
            if !((n - 1.0).abs() <= UNIT_TOLERANCE) {
                return Err(Error::NonUnitKey { index: i, norm: n });
            }
            keys.extend_from_slice(&d.vector);
        }
        Ok(Self { dim, ids: descriptors.iter().map(|d| d.expert_id.clone()).collect(), keys })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn id(&self, row: usize) -> &str {
        &self.ids[row]
    }

    pub fn key(&self, row: usize) -> &[f64] {
        &self.keys[row * self.dim..(row + 1) * self.dim]
    }

    /// Inner product of `q` with every key, in row order.
    pub fn similarities(&self, q: &[f64]) -> Result<Vec<f64>> {
        if q.len() != self.dim {
            return Err(Error::DimensionMismatch { context: "index query", expected: self.dim, found: q.len() });
        }
        Ok(self.keys.chunks_exact(self.dim).map(|k| dot(k, q)).collect())
    }

    /// The `k` most similar keys, most similar first.
    pub fn top_k(&self, q: &[f64], k: usize) -> Result<Vec<Neighbor>> {
        if k == 0 || k > self.len() {
            return Err(Error::InvalidK { k, len: self.len() });
        }
        let mut all: Vec<Neighbor> = self
            .similarities(q)?
            .into_iter()
            .enumerate()
            .map(|(index, similarity)| Neighbor { index, similarity })
            .collect();
        if k < all.len() {
            all.select_nth_unstable_by(k - 1, rank);
            all.truncate(k);
        }
        all.sort_by(rank);
        Ok(all)
    }
}
