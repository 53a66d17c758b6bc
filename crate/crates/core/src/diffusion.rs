//! Graph diffusion re-ranking.
//!
//! The gallery becomes a sparse affinity graph with monomial-kernel weights
//! `max(cos, 0)^gamma` restricted to k-nearest-neighbor edges. The graph is
//! symmetrically normalized, `S = D^-1/2 A D^-1/2`, and each query's seed
//! vector `y` is propagated with `f <- alpha S f + (1 - alpha) y`.

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::rank::{by_score_desc, desc, top_k_indices, RankList, Ranked};
use crate::similarity::{cosine_similarity, SimilarityMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeMode {
    /// Keep `(i, j)` when either endpoint lists the other among its top k.
    Union,
    /// Keep `(i, j)` only when both do.
    Mutual,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionParams {
    pub k: usize,
    pub k_q: usize,
    pub alpha: f64,
    pub t_max: usize,
    pub gamma: f64,
    pub tol: f64,
    pub edges: EdgeMode,
}

impl Default for DiffusionParams {
    fn default() -> Self {
        Self {
            k: 50,
            k_q: 25,
            alpha: 0.95,
            t_max: 25,
            gamma: 3.0,
            tol: 1e-6,
            edges: EdgeMode::Union,
        }
    }
}

impl DiffusionParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParam(msg));
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad(format!("diffusion alpha must lie in (0, 1), got {}", self.alpha));
        }
        if self.k == 0 || self.k_q == 0 || self.t_max == 0 {
            return bad("diffusion k, k_q and t_max must be >= 1".into());
        }
        if !(self.gamma >= 1.0 && self.gamma.is_finite()) {
            return bad(format!("diffusion gamma must be >= 1, got {}", self.gamma));
        }
        if self.tol.is_nan() || self.tol <= 0.0 {
            return bad(format!("diffusion tol must be > 0, got {}", self.tol));
        }
        Ok(())
    }
}

/// Symmetric sparse matrix in CSR form with ascending column indices.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl CsrMatrix {
    /// Builds from per-row `(column, value)` lists; zero values are dropped.
    pub fn from_rows(rows: Vec<Vec<(usize, f64)>>) -> Self {
        let n = rows.len();
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        row_ptr.push(0);
        for mut row in rows {
            row.sort_unstable_by_key(|e| e.0);
            for (c, v) in row {
                if v != 0.0 {
                    cols.push(c);
                    vals.push(v);
                }
            }
            row_ptr.push(cols.len());
        }
        Self { n, row_ptr, cols, vals }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        self.cols[r.clone()].iter().copied().zip(self.vals[r].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        match self.cols[r.clone()].binary_search(&j) {
            Ok(at) => self.vals[r.start + at],
            Err(_) => 0.0,
        }
    }

    /// `out = self * x`, each row summed in column order.
    pub fn mul_vec(&self, x: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            *o = self.row(i).map(|(c, v)| v * x[c]).sum();
        }
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut d = vec![vec![0.0; self.n]; self.n];
        for (i, row) in d.iter_mut().enumerate() {
            for (c, v) in self.row(i) {
                row[c] = v;
            }
        }
        d
    }
}

/// Affinity graph `A`, its degrees `D = A 1`, and `S = D^-1/2 A D^-1/2`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityGraph {
    pub affinity: CsrMatrix,
    pub normalized: CsrMatrix,
    pub degree: Vec<f64>,
}

impl AffinityGraph {
    /// Normalizes an explicit symmetric, zero-diagonal, non-negative affinity.
    pub fn from_affinity(affinity: CsrMatrix) -> Result<Self> {
        let n = affinity.n();
        for i in 0..n {
            for (j, v) in affinity.row(i) {
                if j == i {
                    return Err(Error::InvalidParam(format!("affinity has a self-loop at {i}")));
                }
                if !(v > 0.0 && v.is_finite()) {
                    return Err(Error::InvalidParam(format!("affinity entry ({i}, {j}) = {v}")));
                }
                if affinity.get(j, i) != v {
                    return Err(Error::InvalidParam(format!("affinity not symmetric at ({i}, {j})")));
                }
            }
        }
        let degree: Vec<f64> = (0..n).map(|i| affinity.row(i).map(|e| e.1).sum()).collect();
        let isolated = degree.iter().filter(|&&d| d == 0.0).count();
        if isolated > 0 {
            warn!("diffusion: {isolated} disconnected node(s); their normalization entries are 0");
        }
        let inv_sqrt: Vec<f64> = degree
            .iter()
            .map(|&d| if d > 0.0 { 1.0 / d.sqrt() } else { 0.0 })
            .collect();
        let rows = (0..n)
            .map(|i| {
                affinity
                    .row(i)
                    .map(|(j, v)| (j, v * (inv_sqrt[i] * inv_sqrt[j])))
                    .collect()
            })
            .collect();
        Ok(Self {
            normalized: CsrMatrix::from_rows(rows),
            affinity,
            degree,
        })
    }
}

fn kernel(cos: f64, gamma: f64) -> f64 {
    cos.max(0.0).powf(gamma)
}

/// Builds the locally constrained affinity graph over the gallery.
pub fn build_affinity(g: &EmbeddingMatrix, p: &DiffusionParams) -> Result<AffinityGraph> {
    p.validate()?;
    let sims = cosine_similarity(g, g)?;
    let n = g.n_rows();
    let knn: Vec<Vec<usize>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut l = top_k_indices(sims.row(i), p.k, Some(i));
            l.sort_unstable();
            l
        })
        .collect();
    let listed = |i: usize, j: usize| knn[i].binary_search(&j).is_ok();
    let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    for i in 0..n {
        for &j in &knn[i] {
            let keep = match p.edges {
                EdgeMode::Union => true,
                EdgeMode::Mutual => listed(j, i),
            };
            // each undirected edge is emitted once, from its smaller endpoint
            // or from the only endpoint that lists it
            if !keep || (listed(j, i) && j < i) {
                continue;
            }
            let w = kernel(sims.get(i, j), p.gamma);
            if w > 0.0 {
                rows[i].push((j, w));
                rows[j].push((i, w));
            }
        }
    }
    AffinityGraph::from_affinity(CsrMatrix::from_rows(rows))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionResult {
    pub f: Vec<f64>,
    pub iterations: usize,
    /// Final `‖f_t - f_{t-1}‖∞`.
    pub residual: f64,
    pub converged: bool,
}

/// Iterates `f_t = alpha S f_{t-1} + (1 - alpha) y` from `f_0 = y` until the
/// residual drops below `tol` or `t_max` steps. Non-convergence is reported
/// in the result, not as an error.
pub fn diffuse(graph: &AffinityGraph, y: &[f64], p: &DiffusionParams) -> Result<DiffusionResult> {
    p.validate()?;
    let s = &graph.normalized;
    if y.len() != s.n() {
        return Err(Error::DimensionMismatch {
            expected: s.n(),
            found: y.len(),
        });
    }
    if y.iter().any(|&v| !(v >= 0.0 && v.is_finite())) {
        return Err(Error::InvalidParam(
            "seed vector must be finite and non-negative".into(),
        ));
    }
    Ok(iterate(s, y, p))
}

fn iterate(s: &CsrMatrix, y: &[f64], p: &DiffusionParams) -> DiffusionResult {
    let mut f = y.to_vec();
    let mut next = vec![0.0; y.len()];
    let mut residual = f64::INFINITY;
    let mut iterations = 0;
    while iterations < p.t_max {
        s.mul_vec(&f, &mut next);
        residual = 0.0;
        for ((n, &old), &yi) in next.iter_mut().zip(&f).zip(y) {
            *n = p.alpha * *n + (1.0 - p.alpha) * yi;
            residual = f64::max(residual, (*n - old).abs());
        }
        std::mem::swap(&mut f, &mut next);
        iterations += 1;
        if residual < p.tol {
            break;
        }
    }
    DiffusionResult {
        f,
        iterations,
        residual,
        converged: residual < p.tol,
    }
}

/// Seed vector of one query: kernel weights on its `k_q` nearest gallery
/// nodes, ℓ1-normalized. Falls back to uniform weights on those nodes when
/// every kernel weight is zero.
pub fn seed_vector(query_sims: &[f64], p: &DiffusionParams) -> Vec<f64> {
    let mut y = vec![0.0; query_sims.len()];
    let seeds = top_k_indices(query_sims, p.k_q, None);
    for &j in &seeds {
        y[j] = kernel(query_sims[j], p.gamma);
    }
    let total: f64 = y.iter().sum();
    if total > 0.0 {
        y.iter_mut().for_each(|v| *v /= total);
    } else if !seeds.is_empty() {
        let w = 1.0 / seeds.len() as f64;
        seeds.iter().for_each(|&j| y[j] = w);
    }
    y
}

/// Diffused scores of every query against the gallery, plus the number of
/// queries whose iteration stopped at `t_max`.
pub fn diffusion_scores(
    q: &EmbeddingMatrix,
    g: &EmbeddingMatrix,
    p: &DiffusionParams,
) -> Result<(SimilarityMatrix, usize)> {
    let graph = build_affinity(g, p)?;
    let sims = cosine_similarity(q, g)?;
    let results: Vec<DiffusionResult> = (0..q.n_rows())
        .into_par_iter()
        .map(|i| iterate(&graph.normalized, &seed_vector(sims.row(i), p), p))
        .collect();
    let unconverged = results.iter().filter(|r| !r.converged).count();
    if unconverged > 0 {
        warn!(
            "diffusion: {unconverged} of {} queries stopped at t_max = {} above tol = {}",
            results.len(),
            p.t_max,
            p.tol
        );
    }
    let values = results.into_iter().flat_map(|r| r.f).collect();
    Ok((SimilarityMatrix::new(values, q.n_rows(), g.n_rows())?, unconverged))
}

/// Ranks the gallery by descending diffused score. Nodes with equal scores
/// (typically those the diffusion never reached) fall back to cosine order.
pub fn diffusion_rerank(q: &EmbeddingMatrix, g: &EmbeddingMatrix, p: &DiffusionParams) -> Result<RankList> {
    let (scores, _) = diffusion_scores(q, g, p)?;
    let sims = cosine_similarity(q, g)?;
    Ok(rank_with_fallback(&scores, &sims))
}

pub(crate) fn rank_with_fallback(scores: &SimilarityMatrix, fallback: &SimilarityMatrix) -> RankList {
    let lists = (0..scores.n_queries())
        .into_par_iter()
        .map(|i| {
            let (f, c) = (scores.row(i), fallback.row(i));
            let mut idx: Vec<usize> = (0..f.len()).collect();
            idx.sort_unstable_by(|&a, &b| desc(f[a], f[b]).then(by_score_desc((c[a], a), (c[b], b))));
            idx.into_iter().map(|j| Ranked { index: j, score: f[j] }).collect()
        })
        .collect();
    RankList::from_parts_unchecked(lists, scores.n_gallery())
}
