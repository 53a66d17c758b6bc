//! Ranked gallery lists and the global ordering rule.
//!
//! Every ranking in the crate orders by descending score and breaks exact
//! ties by ascending gallery index.

use std::cmp::Ordering;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::similarity::SimilarityMatrix;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ranked {
    pub index: usize,
    pub score: f64,
}

/// Per-query ordered gallery indices with non-increasing scores.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RankList {
    lists: Vec<Vec<Ranked>>,
    n_gallery: usize,
}

impl RankList {
    pub fn new(lists: Vec<Vec<Ranked>>, n_gallery: usize) -> Result<Self> {
        for (q, list) in lists.iter().enumerate() {
            let mut seen = vec![false; n_gallery];
            for (pos, r) in list.iter().enumerate() {
                if r.index >= n_gallery {
                    return Err(Error::IndexOutOfRange {
                        index: r.index,
                        len: n_gallery,
                    });
                }
                if std::mem::replace(&mut seen[r.index], true) {
                    return Err(Error::InvalidParam(format!(
                        "query {q}: gallery index {} ranked twice",
                        r.index
                    )));
                }
                if !r.score.is_finite() {
                    return Err(Error::NonFinite { row: q, col: pos });
                }
                if pos > 0 && r.score > list[pos - 1].score {
                    return Err(Error::InvalidParam(format!(
                        "query {q}: scores increase at position {pos}"
                    )));
                }
            }
        }
        Ok(Self { lists, n_gallery })
    }

    pub(crate) fn from_parts_unchecked(lists: Vec<Vec<Ranked>>, n_gallery: usize) -> Self {
        debug_assert!(Self::new(lists.clone(), n_gallery).is_ok());
        Self { lists, n_gallery }
    }

    pub fn n_queries(&self) -> usize {
        self.lists.len()
    }

    pub fn n_gallery(&self) -> usize {
        self.n_gallery
    }

    pub fn list(&self, query: usize) -> &[Ranked] {
        &self.lists[query]
    }

    pub fn lists(&self) -> &[Vec<Ranked>] {
        &self.lists
    }

    pub fn indices(&self, query: usize) -> Vec<usize> {
        self.lists[query].iter().map(|r| r.index).collect()
    }

    pub fn truncated(&self, k: usize) -> RankList {
        RankList {
            lists: self.lists.iter().map(|l| l[..k.min(l.len())].to_vec()).collect(),
            n_gallery: self.n_gallery,
        }
    }
}

/// Descending score, then ascending index. `-0.0` and `0.0` tie.
pub(crate) fn by_score_desc(a: (f64, usize), b: (f64, usize)) -> Ordering {
    desc(a.0, b.0).then(a.1.cmp(&b.1))
}

/// Descending order on finite scores, treating the two zeros as equal.
pub(crate) fn desc(a: f64, b: f64) -> Ordering {
    (b + 0.0).total_cmp(&(a + 0.0))
}

/// Indices of the `k` highest scores under the global ordering rule,
/// skipping `exclude` when given. `k` is clamped to the candidate count.
pub(crate) fn top_k_indices(scores: &[f64], k: usize, exclude: Option<usize>) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).filter(|&j| Some(j) != exclude).collect();
    let k = k.min(idx.len());
    if k == 0 {
        return Vec::new();
    }
    let cmp = |a: &usize, b: &usize| by_score_desc((scores[*a], *a), (scores[*b], *b));
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, cmp);
        idx.truncate(k);
    }
    idx.sort_unstable_by(cmp);
    idx
}

/// Ranks every query row of `s`, keeping the top `k` (all when `None`).
pub fn rank_topk(s: &SimilarityMatrix, k: Option<usize>) -> RankList {
    let ng = s.n_gallery();
    let k = k.unwrap_or(ng).min(ng);
    let lists = (0..s.n_queries())
        .into_par_iter()
        .map(|i| {
            let row = s.row(i);
            top_k_indices(row, k, None)
                .into_iter()
                .map(|j| Ranked {
                    index: j,
                    score: row[j],
                })
                .collect()
        })
        .collect();
    RankList { lists, n_gallery: ng }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ranks(sims: &[f64], k: Option<usize>) -> Vec<usize> {
        let s = SimilarityMatrix::from_rows(&[sims.to_vec()]).unwrap();
        rank_topk(&s, k).indices(0)
    }

    #[test]
    fn examples() {
        assert_eq!(ranks(&[0.9, 0.1, 0.5], None), vec![0, 2, 1]);
        assert_eq!(ranks(&[0.5, 0.5], Some(2)), vec![0, 1]);
        assert_eq!(ranks(&[0.1, 0.9, 0.9, 0.2], Some(2)), vec![1, 2]);
    }

    #[test]
    fn signed_zeros_tie() {
        assert_eq!(ranks(&[-0.0, 0.0, -0.0], None), vec![0, 1, 2]);
        assert_eq!(top_k_indices(&[0.0, -0.0], 1, Some(0)), vec![1]);
    }

    #[test]
    fn k_clamps_to_gallery() {
        assert_eq!(ranks(&[0.2, 0.3], Some(10)), vec![1, 0]);
        assert!(ranks(&[0.2, 0.3], Some(0)).is_empty());
    }

    #[test]
    fn exclusion() {
        assert_eq!(top_k_indices(&[1.0, 0.5, 0.7], 2, Some(0)), vec![2, 1]);
        assert_eq!(top_k_indices(&[1.0], 3, Some(0)), Vec::<usize>::new());
    }

    #[test]
    fn validation() {
        let ok = vec![Ranked { index: 1, score: 0.9 }, Ranked { index: 0, score: 0.9 }];
        assert!(RankList::new(vec![ok], 2).is_ok());
        let dup = vec![Ranked { index: 1, score: 0.9 }, Ranked { index: 1, score: 0.5 }];
        assert!(RankList::new(vec![dup], 2).is_err());
        let rising = vec![Ranked { index: 1, score: 0.1 }, Ranked { index: 0, score: 0.5 }];
        assert!(RankList::new(vec![rising], 2).is_err());
        let out = vec![Ranked { index: 5, score: 0.1 }];
        assert!(RankList::new(vec![out], 2).is_err());
    }
}
