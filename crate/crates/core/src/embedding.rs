//! Row-major embedding matrices and the vector primitives shared by every stage.

use std::collections::HashSet;

use crate::error::{Error, Result};

/// Rows whose L2 norm is within this distance of 1 count as unit length.
pub const UNIT_TOLERANCE: f64 = 1e-6;

/// Norms below this are treated as zero.
pub const ZERO_NORM: f64 = 1e-12;

/// An `n x d` matrix of image descriptors, one row per image.
///
/// Entries are stored as `f64`; the on-disk format is `f32`, so every matrix
/// loaded from disk is exactly representable and accumulation runs at twice
/// the storage width. The `normalized` flag is derived from the data and is
/// true when every row has unit norm within [`UNIT_TOLERANCE`].
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    data: Vec<f64>,
    dim: usize,
    row_ids: Vec<String>,
    normalized: bool,
}

impl EmbeddingMatrix {
    pub fn new(data: Vec<f64>, dim: usize, row_ids: Vec<String>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidParam("embedding dimension must be >= 1".into()));
        }
        if data.len() != row_ids.len() * dim {
            return Err(Error::DimensionMismatch {
                expected: row_ids.len() * dim,
                found: data.len(),
            });
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                row: pos / dim,
                col: pos % dim,
            });
        }
        let mut seen = HashSet::with_capacity(row_ids.len());
        for id in &row_ids {
            if !seen.insert(id.as_str()) {
                return Err(Error::DuplicateId(id.clone()));
            }
        }
        let normalized = data
            .chunks_exact(dim)
            .all(|row| (norm(row) - 1.0).abs() <= UNIT_TOLERANCE);
        Ok(Self {
            data,
            dim,
            row_ids,
            normalized,
        })
    }

    /// Builds a matrix from explicit rows with ids `"0"`, `"1"`, ...
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let ids = (0..rows.len()).map(|i| i.to_string()).collect();
        Self::from_rows_with_ids(rows, ids)
    }

    pub fn from_rows_with_ids(rows: &[Vec<f64>], row_ids: Vec<String>) -> Result<Self> {
        let dim = rows.first().map(Vec::len).unwrap_or(1);
        let mut data = Vec::with_capacity(rows.len() * dim);
        for row in rows {
            if row.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Self::new(data, dim, row_ids)
    }

    pub fn n_rows(&self) -> usize {
        self.row_ids.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.row_ids.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.data.chunks_exact(self.dim)
    }

    pub fn row_ids(&self) -> &[String] {
        &self.row_ids
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub(crate) fn require_normalized(&self) -> Result<()> {
        if self.normalized {
            return Ok(());
        }
        let (row, norm) = self
            .rows()
            .map(norm)
            .enumerate()
            .find(|(_, n)| (n - 1.0).abs() > UNIT_TOLERANCE)
            .unwrap_or((0, f64::NAN));
        Err(Error::NotNormalized { row, norm })
    }

    /// Rebuilds a matrix with the same ids from new row data of the same shape.
    pub(crate) fn with_data(&self, data: Vec<f64>) -> Result<Self> {
        Self::new(data, self.dim, self.row_ids.clone())
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Scales `v` to unit length in place. Vectors already at unit length to
/// within a few ulps are left bit-for-bit unchanged, which makes
/// normalization idempotent. Returns `false` for (near-)zero vectors.
pub(crate) fn normalize_in_place(v: &mut [f64]) -> bool {
    let n = norm(v);
    if n < ZERO_NORM {
        return false;
    }
    if (n - 1.0).abs() > 4.0 * f64::EPSILON {
        v.iter_mut().for_each(|x| *x /= n);
    }
    true
}

/// Returns a copy of `m` with every row scaled to unit L2 norm.
pub fn l2_normalize_rows(m: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
    let mut data = m.data.clone();
    for (row, chunk) in data.chunks_exact_mut(m.dim).enumerate() {
        if !normalize_in_place(chunk) {
            return Err(Error::ZeroRow { row });
        }
    }
    m.with_data(data)
}

/// Arithmetic mean of the selected rows, not normalized.
pub fn mean_rows(m: &EmbeddingMatrix, subset: &[usize]) -> Result<Vec<f64>> {
    if subset.is_empty() {
        return Err(Error::EmptySubset);
    }
    let mut acc = vec![0.0; m.dim];
    for &i in subset {
        if i >= m.n_rows() {
            return Err(Error::IndexOutOfRange {
                index: i,
                len: m.n_rows(),
            });
        }
        acc.iter_mut().zip(m.row(i)).for_each(|(a, x)| *a += x);
    }
    if subset.len() > 1 {
        let count = subset.len() as f64;
        acc.iter_mut().for_each(|a| *a /= count);
    }
    Ok(acc)
}
