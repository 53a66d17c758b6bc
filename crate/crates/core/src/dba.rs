//! Database-side feature augmentation: each gallery descriptor is replaced by
//! the aggregate of itself and its k nearest gallery neighbors.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::{dot, normalize_in_place, EmbeddingMatrix};
use crate::error::{Error, Result};
use crate::rank::top_k_indices;
use crate::similarity::cosine_similarity;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DbaWeighting {
    Uniform,
    /// Neighbors weighted by `max(cos, 0)`; the row itself has weight 1.
    Similarity,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DbaParams {
    pub k: usize,
    pub include_self: bool,
    pub weighting: DbaWeighting,
}

impl Default for DbaParams {
    fn default() -> Self {
        Self {
            k: 10,
            include_self: true,
            weighting: DbaWeighting::Uniform,
        }
    }
}

impl DbaParams {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidParam("dba k must be >= 1".into()));
        }
        Ok(())
    }
}

/// k nearest other rows of every gallery row, by cosine with the global tie rule.
pub fn gallery_knn(g: &EmbeddingMatrix, k: usize) -> Result<Vec<Vec<usize>>> {
    let sims = cosine_similarity(g, g)?;
    Ok((0..g.n_rows())
        .into_par_iter()
        .map(|i| top_k_indices(sims.row(i), k, Some(i)))
        .collect())
}

/// Augments every row from the pre-augmentation gallery; no cascading.
pub fn dba_augment(g: &EmbeddingMatrix, p: &DbaParams) -> Result<EmbeddingMatrix> {
    p.validate()?;
    g.require_normalized()?;
    if g.n_rows() < p.k + 1 {
        return Err(Error::GalleryTooSmall { k: p.k, n: g.n_rows() });
    }
    let neighbors = gallery_knn(g, p.k)?;
    let d = g.dim();
    let mut data = vec![0.0; g.n_rows() * d];
    data.par_chunks_mut(d).enumerate().for_each(|(i, out)| {
        let mut total = 0.0;
        if p.include_self {
            out.copy_from_slice(g.row(i));
            total = 1.0;
        }
        for &j in &neighbors[i] {
            let row = g.row(j);
            let w = match p.weighting {
                DbaWeighting::Uniform => 1.0,
                DbaWeighting::Similarity => dot(g.row(i), row).max(0.0),
            };
            total += w;
            out.iter_mut().zip(row).for_each(|(a, x)| *a += w * x);
        }
        if total > 0.0 {
            out.iter_mut().for_each(|a| *a /= total);
        }
    });
    for (row, chunk) in data.chunks_exact_mut(d).enumerate() {
        if !normalize_in_place(chunk) {
            return Err(Error::ZeroRow { row });
        }
    }
    g.with_data(data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[Vec<f64>]) -> EmbeddingMatrix {
        EmbeddingMatrix::from_rows(rows).unwrap()
    }

    #[test]
    fn two_orthogonal_rows_meet_in_the_middle() {
        let g = m(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let out = dba_augment(
            &g,
            &DbaParams {
                k: 1,
                ..DbaParams::default()
            },
        )
        .unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        for i in 0..2 {
            assert!((out.row(i)[0] - h).abs() < 1e-12 && (out.row(i)[1] - h).abs() < 1e-12);
        }
        assert_eq!(out.row_ids(), g.row_ids());
    }

    #[test]
    fn tie_rule_picks_lower_index() {
        let g = m(&[vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert_eq!(gallery_knn(&g, 1).unwrap(), vec![vec![1], vec![0], vec![0]]);
        let out = dba_augment(
            &g,
            &DbaParams {
                k: 1,
                ..DbaParams::default()
            },
        )
        .unwrap();
        assert_eq!(out.row(0), &[1.0, 0.0]);
    }

    #[test]
    fn duplicates_are_fixed_points() {
        let g = m(&vec![vec![0.6, 0.8]; 4]);
        for weighting in [DbaWeighting::Uniform, DbaWeighting::Similarity] {
            let out = dba_augment(
                &g,
                &DbaParams {
                    k: 3,
                    include_self: true,
                    weighting,
                },
            )
            .unwrap();
            assert_eq!(out.row_ids(), g.row_ids());
            for (a, b) in out.as_slice().iter().zip(g.as_slice()) {
                assert!((a - b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn errors() {
        let g = m(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert!(matches!(
            dba_augment(
                &g,
                &DbaParams {
                    k: 2,
                    ..DbaParams::default()
                }
            ),
            Err(Error::GalleryTooSmall { k: 2, n: 2 })
        ));
        assert!(dba_augment(
            &g,
            &DbaParams {
                k: 0,
                ..DbaParams::default()
            }
        )
        .is_err());
        let raw = m(&[vec![3.0, 4.0], vec![0.0, 1.0]]);
        assert!(dba_augment(
            &raw,
            &DbaParams {
                k: 1,
                ..DbaParams::default()
            }
        )
        .is_err());
    }

    #[test]
    fn similarity_weighting_without_self() {
        let g = m(&[vec![1.0, 0.0], vec![0.6, 0.8], vec![0.0, 1.0]]);
        let p = DbaParams {
            k: 1,
            include_self: false,
            weighting: DbaWeighting::Similarity,
        };
        let out = dba_augment(&g, &p).unwrap();
        // each row becomes its single nearest other row
        assert!((out.row(0)[0] - 0.6).abs() < 1e-12);
        assert!((out.row(2)[1] - 0.8).abs() < 1e-12);
    }
}
