//! k-reciprocal encoding re-ranking.
//!
//! Queries and gallery form one neighbor pool. For every pool item `i`:
//!
//! * `R(i, k)` holds the items `j` with `j` in `kNN(i)` and `i` in `kNN(j)`,
//!   where `kNN` never contains the item itself;
//! * `R*(i, k)` adds `R(g, k/2)` (floor) for each `g` in `R(i, k)` whose
//!   half-size set overlaps `R(i, k)` in at least two thirds of its members;
//! * the encoding of `i` is a sparse vector over `R*(i, k) ∪ {i}`, either
//!   indicator weights or `exp(cos - 1)` weights normalized to sum 1, then
//!   averaged over `i` and its `k2 - 1` nearest neighbors.
//!
//! The Jaccard distance between a query and a gallery encoding is
//! `1 - Σmin / Σmax`, blended with `1 - cos` by `lambda`.

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::rank::{rank_topk, top_k_indices, RankList};
use crate::similarity::{cosine_similarity, SimilarityMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KrParams {
    pub k1: usize,
    pub k2: usize,
    pub lambda: f64,
    pub sigma_weighting: bool,
}

impl Default for KrParams {
    fn default() -> Self {
        Self {
            k1: 60,
            k2: 30,
            lambda: 0.5,
            sigma_weighting: true,
        }
    }
}

impl KrParams {
    pub fn validate(&self) -> Result<()> {
        if self.k2 == 0 || self.k1 < self.k2 {
            return Err(Error::InvalidParam(format!(
                "k-reciprocal needs k1 >= k2 >= 1, got k1 = {}, k2 = {}",
                self.k1, self.k2
            )));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::InvalidParam(format!(
                "lambda must lie in [0, 1], got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

/// Ranked nearest-neighbor lists (self excluded) over a pool of items.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborLists {
    lists: Vec<Vec<usize>>,
    /// Per item, `(neighbor, rank position)` sorted by neighbor.
    positions: Vec<Vec<(usize, usize)>>,
}

impl NeighborLists {
    /// Wraps explicit ranked lists. Lists must not contain their own item.
    pub fn new(lists: Vec<Vec<usize>>) -> Result<Self> {
        let n = lists.len();
        for (i, l) in lists.iter().enumerate() {
            let mut seen = vec![false; n];
            for &j in l {
                if j >= n {
                    return Err(Error::IndexOutOfRange { index: j, len: n });
                }
                if j == i || std::mem::replace(&mut seen[j], true) {
                    return Err(Error::InvalidParam(format!(
                        "neighbor list {i} repeats an item or contains itself"
                    )));
                }
            }
        }
        Ok(Self::build(lists))
    }

    fn build(lists: Vec<Vec<usize>>) -> Self {
        let positions = lists
            .iter()
            .map(|l| {
                let mut p: Vec<(usize, usize)> = l.iter().enumerate().map(|(pos, &j)| (j, pos)).collect();
                p.sort_unstable();
                p
            })
            .collect();
        Self { lists, positions }
    }

    /// `depth` nearest neighbors of every row of a square similarity matrix.
    pub fn from_similarity(s: &SimilarityMatrix, depth: usize) -> Self {
        let lists = (0..s.n_queries())
            .into_par_iter()
            .map(|i| top_k_indices(s.row(i), depth, Some(i)))
            .collect();
        Self::build(lists)
    }

    pub fn len(&self) -> usize {
        self.lists.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lists.is_empty()
    }

    pub fn knn(&self, i: usize, k: usize) -> &[usize] {
        let l = &self.lists[i];
        &l[..k.min(l.len())]
    }

    /// Whether `j` is among the `k` nearest neighbors of `i`.
    pub fn contains(&self, i: usize, j: usize, k: usize) -> bool {
        let p = &self.positions[i];
        match p.binary_search_by_key(&j, |&(n, _)| n) {
            Ok(at) => p[at].1 < k,
            Err(_) => false,
        }
    }
}

/// `R(i, k)`, ascending.
pub fn reciprocal_set(nb: &NeighborLists, i: usize, k: usize) -> Vec<usize> {
    let mut r: Vec<usize> = nb.knn(i, k).iter().copied().filter(|&j| nb.contains(j, i, k)).collect();
    r.sort_unstable();
    r
}

/// Reciprocal and expanded reciprocal sets of every pool item at one `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReciprocalSets {
    pub k: usize,
    pub r: Vec<Vec<usize>>,
    pub r_star: Vec<Vec<usize>>,
}

fn sorted_overlap(a: &[usize], b: &[usize]) -> usize {
    let (mut i, mut j, mut n) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                n += 1;
                i += 1;
                j += 1;
            }
        }
    }
    n
}

/// Expands one reciprocal set: for each candidate `g` in `r`, its half-size
/// set `half[g]` is merged when `|r ∩ half[g]| >= (2/3)|half[g]|`.
/// `r` and every `half[g]` must be sorted ascending.
pub fn expand_set(r: &[usize], half: &[Vec<usize>]) -> Vec<usize> {
    let mut out = r.to_vec();
    for &g in r {
        let cand = &half[g];
        if 3 * sorted_overlap(r, cand) >= 2 * cand.len() {
            out.extend_from_slice(cand);
        }
    }
    out.sort_unstable();
    out.dedup();
    out
}

/// Builds `R(·, k)` and `R*(·, k)` for every item of the pool.
pub fn expand_reciprocal(nb: &NeighborLists, k: usize) -> ReciprocalSets {
    let n = nb.len();
    let r: Vec<Vec<usize>> = (0..n).into_par_iter().map(|i| reciprocal_set(nb, i, k)).collect();
    let half: Vec<Vec<usize>> = (0..n).into_par_iter().map(|i| reciprocal_set(nb, i, k / 2)).collect();
    let r_star = r.par_iter().map(|ri| expand_set(ri, &half)).collect();
    ReciprocalSets { k, r, r_star }
}

/// Hard-set Jaccard distance; two empty sets are at distance 1.
pub fn jaccard_distance(a: &[usize], b: &[usize]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_unstable();
    a.dedup();
    b.sort_unstable();
    b.dedup();
    let inter = sorted_overlap(&a, &b);
    let union = a.len() + b.len() - inter;
    if union == 0 {
        return 1.0;
    }
    1.0 - inter as f64 / union as f64
}

/// Sparse non-negative vector, entries sorted by index.
pub type SparseVec = Vec<(usize, f64)>;

/// Weighted Jaccard distance `1 - Σmin / Σmax`; all-zero pairs are at distance 1.
pub fn weighted_jaccard_distance(a: &SparseVec, b: &SparseVec) -> f64 {
    let (mut i, mut j) = (0, 0);
    let (mut smin, mut smax) = (0.0, 0.0);
    while i < a.len() || j < b.len() {
        let ia = a.get(i).map_or(usize::MAX, |e| e.0);
        let ib = b.get(j).map_or(usize::MAX, |e| e.0);
        if ia == ib {
            smin += a[i].1.min(b[j].1);
            smax += a[i].1.max(b[j].1);
            i += 1;
            j += 1;
        } else if ia < ib {
            smax += a[i].1;
            i += 1;
        } else {
            smax += b[j].1;
            j += 1;
        }
    }
    if smax <= 0.0 {
        return 1.0;
    }
    (1.0 - smin / smax).clamp(0.0, 1.0)
}

/// Encodings of every pool item after local expansion over `k2` neighbors.
pub fn encode(pool_sims: &SimilarityMatrix, nb: &NeighborLists, sets: &ReciprocalSets, p: &KrParams) -> Vec<SparseVec> {
    let n = nb.len();
    let base: Vec<SparseVec> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut members = sets.r_star[i].clone();
            if let Err(at) = members.binary_search(&i) {
                members.insert(at, i);
            }
            if p.sigma_weighting {
                let w: Vec<f64> = members.iter().map(|&j| (pool_sims.get(i, j) - 1.0).exp()).collect();
                let total: f64 = w.iter().sum();
                members.into_iter().zip(w).map(|(j, w)| (j, w / total)).collect()
            } else {
                members.into_iter().map(|j| (j, 1.0)).collect()
            }
        })
        .collect();
    if p.k2 <= 1 {
        return base;
    }
    (0..n)
        .into_par_iter()
        .map(|i| {
            let group: Vec<usize> = std::iter::once(i).chain(nb.knn(i, p.k2 - 1).iter().copied()).collect();
            let mut acc = vec![0.0; n];
            let mut touched = Vec::new();
            for &j in &group {
                for &(c, w) in &base[j] {
                    if acc[c] == 0.0 {
                        touched.push(c);
                    }
                    acc[c] += w;
                }
            }
            touched.sort_unstable();
            let count = group.len() as f64;
            touched.into_iter().map(|c| (c, acc[c] / count)).collect()
        })
        .collect()
}

/// Pairwise cosine and Jaccard distances of a k-reciprocal run.
#[derive(Debug, Clone, PartialEq)]
pub struct KrDistances {
    pub cosine: SimilarityMatrix,
    pub jaccard: SimilarityMatrix,
    pub lambda: f64,
}

impl KrDistances {
    pub fn original_distance(&self, i: usize, j: usize) -> f64 {
        1.0 - self.cosine.get(i, j)
    }

    pub fn jaccard_distance(&self, i: usize, j: usize) -> f64 {
        self.jaccard.get(i, j)
    }

    /// `lambda * (1 - cos) + (1 - lambda) * d_jaccard`.
    pub fn final_distance(&self, i: usize, j: usize) -> f64 {
        self.lambda * self.original_distance(i, j) + (1.0 - self.lambda) * self.jaccard_distance(i, j)
    }

    /// `1 - final_distance`, evaluated as `lambda * cos + (1 - lambda) * (1 - d_jaccard)`
    /// so that `lambda = 1` reproduces the cosine scores bit for bit.
    pub fn blended_scores(&self) -> SimilarityMatrix {
        let l = self.lambda;
        let values = self
            .cosine
            .as_slice()
            .iter()
            .zip(self.jaccard.as_slice())
            .map(|(c, dj)| l * c + (1.0 - l) * (1.0 - dj))
            .collect();
        SimilarityMatrix::new(values, self.cosine.n_queries(), self.cosine.n_gallery())
            .expect("blend of finite matrices")
    }
}

fn pool(q: &EmbeddingMatrix, g: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
    if q.dim() != g.dim() {
        return Err(Error::DimensionMismatch {
            expected: q.dim(),
            found: g.dim(),
        });
    }
    let data = [q.as_slice(), g.as_slice()].concat();
    let ids = (0..q.n_rows() + g.n_rows()).map(|i| i.to_string()).collect();
    EmbeddingMatrix::new(data, q.dim(), ids)
}

/// Full k-reciprocal computation over the query ∪ gallery pool.
pub fn krerank_distances(q: &EmbeddingMatrix, g: &EmbeddingMatrix, p: &KrParams) -> Result<KrDistances> {
    p.validate()?;
    q.require_normalized()?;
    g.require_normalized()?;
    let nq = q.n_rows();
    let ng = g.n_rows();
    let all = pool(q, g)?;
    let n = all.n_rows();
    let pool_sims = cosine_similarity(&all, &all)?;

    let mut params = *p;
    if n > 0 && params.k1 > n - 1 {
        warn!(
            "k-reciprocal: k1 = {} exceeds pool size - 1 = {}; clamping",
            params.k1,
            n - 1
        );
        params.k1 = n - 1;
        params.k2 = params.k2.min(params.k1.max(1));
    }
    let nb = NeighborLists::from_similarity(&pool_sims, params.k1);
    let sets = expand_reciprocal(&nb, params.k1);
    let enc = encode(&pool_sims, &nb, &sets, &params);

    // inverted index over gallery encodings
    let mut inverted: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    for (gj, v) in enc[nq..].iter().enumerate() {
        for &(c, w) in v {
            inverted[c].push((gj, w));
        }
    }
    let mass: Vec<f64> = enc.iter().map(|v| v.iter().map(|e| e.1).sum()).collect();

    let mut jaccard = vec![0.0; nq * ng];
    if ng > 0 {
        jaccard.par_chunks_mut(ng).enumerate().for_each(|(i, out)| {
            let mut smin = vec![0.0; ng];
            for &(c, wq) in &enc[i] {
                for &(gj, wg) in &inverted[c] {
                    smin[gj] += wq.min(wg);
                }
            }
            for (gj, o) in out.iter_mut().enumerate() {
                let smax = mass[i] + mass[nq + gj] - smin[gj];
                *o = if smax <= 0.0 {
                    1.0
                } else {
                    (1.0 - smin[gj] / smax).clamp(0.0, 1.0)
                };
            }
        });
    }

    let mut cosine = Vec::with_capacity(nq * ng);
    for i in 0..nq {
        cosine.extend_from_slice(&pool_sims.row(i)[nq..]);
    }
    Ok(KrDistances {
        cosine: SimilarityMatrix::new(cosine, nq, ng)?,
        jaccard: SimilarityMatrix::new(jaccard, nq, ng)?,
        lambda: p.lambda,
    })
}

/// Ranks the gallery by ascending blended distance.
pub fn krerank(q: &EmbeddingMatrix, g: &EmbeddingMatrix, p: &KrParams) -> Result<RankList> {
    let dist = krerank_distances(q, g, p)?;
    Ok(rank_topk(&dist.blended_scores(), None))
}
