use rayon::prelude::*;

use crate::embedding::{dot, EmbeddingMatrix};
use crate::error::{Error, Result};

/// Dense `n_queries x n_gallery` matrix of cosine similarities.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    values: Vec<f64>,
    n_queries: usize,
    n_gallery: usize,
}

impl SimilarityMatrix {
    pub fn new(values: Vec<f64>, n_queries: usize, n_gallery: usize) -> Result<Self> {
        if values.len() != n_queries * n_gallery {
            return Err(Error::DimensionMismatch {
                expected: n_queries * n_gallery,
                found: values.len(),
            });
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                row: pos / n_gallery.max(1),
                col: pos % n_gallery.max(1),
            });
        }
        Ok(Self {
            values,
            n_queries,
            n_gallery,
        })
    }

    /// Builds a matrix from explicit rows; mostly useful in tests.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n_gallery = rows.first().map(Vec::len).unwrap_or(0);
        if let Some(bad) = rows.iter().find(|r| r.len() != n_gallery) {
            return Err(Error::DimensionMismatch {
                expected: n_gallery,
                found: bad.len(),
            });
        }
        Self::new(rows.concat(), rows.len(), n_gallery)
    }

    pub fn n_queries(&self) -> usize {
        self.n_queries
    }

    pub fn n_gallery(&self) -> usize {
        self.n_gallery
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n_gallery + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.n_gallery..(i + 1) * self.n_gallery]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }
}

/// Pairwise cosine similarity between unit-normalized query and gallery rows.
///
/// Rows are processed in parallel; each entry is a single sequential dot
/// product, so the result does not depend on the thread count.
pub fn cosine_similarity(q: &EmbeddingMatrix, g: &EmbeddingMatrix) -> Result<SimilarityMatrix> {
    if q.dim() != g.dim() {
        return Err(Error::DimensionMismatch {
            expected: q.dim(),
            found: g.dim(),
        });
    }
    q.require_normalized()?;
    g.require_normalized()?;
    let ng = g.n_rows();
    let mut values = vec![0.0; q.n_rows() * ng];
    if ng > 0 {
        values.par_chunks_mut(ng).enumerate().for_each(|(i, out)| {
            let qi = q.row(i);
            for (j, v) in out.iter_mut().enumerate() {
                *v = dot(qi, g.row(j));
            }
        });
    }
    Ok(SimilarityMatrix {
        values,
        n_queries: q.n_rows(),
        n_gallery: ng,
    })
}
