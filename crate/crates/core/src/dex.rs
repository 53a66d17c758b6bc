//! Dual embedding expansion.
//!
//! Two halves: [`fuse_ensemble`] averages per-model / per-scale descriptors
//! into a single descriptor of unchanged size, and [`dex_expand`] rewrites
//! each query as itself plus its top-k gallery neighbors weighted by
//! `cos^alpha`, where the neighbors come from the tracklet-ordered ranking
//! of [`tracklet_rerank`]. [`aqe_expand`] and [`alpha_qe_expand`] are the
//! plain-ranking baselines.

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::{mean_rows, normalize_in_place, EmbeddingMatrix};
use crate::error::{Error, Result};
use crate::meta::TrackletTable;
use crate::rank::{by_score_desc, top_k_indices, RankList, Ranked};
use crate::similarity::{cosine_similarity, SimilarityMatrix};

/// Descriptors of the same images from several (model, scale) pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleInput {
    members: Vec<EmbeddingMatrix>,
}

impl EnsembleInput {
    pub fn new(members: Vec<EmbeddingMatrix>) -> Result<Self> {
        let Some(first) = members.first() else {
            return Err(Error::InconsistentEnsemble("no members".into()));
        };
        for (i, m) in members.iter().enumerate().skip(1) {
            if m.dim() != first.dim() {
                return Err(Error::InconsistentEnsemble(format!(
                    "member {i} has dimension {}, expected {}",
                    m.dim(),
                    first.dim()
                )));
            }
            if m.row_ids() != first.row_ids() {
                return Err(Error::InconsistentEnsemble(format!(
                    "member {i} rows differ from member 0"
                )));
            }
        }
        Ok(Self { members })
    }

    pub fn members(&self) -> &[EmbeddingMatrix] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DexParams {
    pub k: usize,
    pub alpha: f64,
    pub renormalize: bool,
}

impl Default for DexParams {
    fn default() -> Self {
        Self {
            k: 20,
            alpha: 2.0,
            renormalize: true,
        }
    }
}

impl DexParams {
    pub fn validate(&self) -> Result<()> {
        check_qe_params(self.k, self.alpha)
    }
}

fn check_qe_params(k: usize, alpha: f64) -> Result<()> {
    if k == 0 {
        return Err(Error::InvalidParam("expansion k must be >= 1".into()));
    }
    if !(alpha.is_finite() && alpha >= 0.0) {
        return Err(Error::InvalidParam(format!(
            "alpha must be finite and >= 0, got {alpha}"
        )));
    }
    Ok(())
}

/// Elementwise mean of all members, then L2-normalized per row. The output
/// dimension equals the member dimension whatever the ensemble size.
pub fn fuse_ensemble(e: &EnsembleInput) -> Result<EmbeddingMatrix> {
    let first = &e.members[0];
    let mut data = first.as_slice().to_vec();
    for m in &e.members[1..] {
        data.iter_mut().zip(m.as_slice()).for_each(|(a, x)| *a += x);
    }
    if e.len() > 1 {
        let count = e.len() as f64;
        data.iter_mut().for_each(|a| *a /= count);
    }
    for (row, chunk) in data.chunks_exact_mut(first.dim()).enumerate() {
        if !normalize_in_place(chunk) {
            return Err(Error::ZeroRow { row });
        }
    }
    first.with_data(data)
}

fn check_partition(g: &EmbeddingMatrix, t: &TrackletTable) -> Result<()> {
    if t.n_rows() != g.n_rows() {
        return Err(Error::InvalidPartition(format!(
            "table covers {} rows, gallery has {}",
            t.n_rows(),
            g.n_rows()
        )));
    }
    Ok(())
}

/// One normalized mean descriptor per tracklet, plus each tracklet's member rows.
pub fn tracklet_gallery(g: &EmbeddingMatrix, t: &TrackletTable) -> Result<(EmbeddingMatrix, Vec<Vec<usize>>)> {
    check_partition(g, t)?;
    let mut data = Vec::with_capacity(t.len() * g.dim());
    for (row, tr) in t.tracklets().iter().enumerate() {
        let mut mean = mean_rows(g, &tr.members)?;
        if !normalize_in_place(&mut mean) {
            return Err(Error::ZeroRow { row });
        }
        data.extend(mean);
    }
    let ids = t.tracklets().iter().map(|tr| tr.id.clone()).collect();
    let members = t.tracklets().iter().map(|tr| tr.members.clone()).collect();
    Ok((EmbeddingMatrix::new(data, g.dim(), ids)?, members))
}

/// Orders tracklets by `tracklet_scores` and expands each in place, members
/// ordered by their own score. Every member carries its tracklet's score.
fn expand_tracklet_order(tracklet_scores: &[f64], member_scores: &[f64], t: &TrackletTable) -> Vec<Ranked> {
    let order = top_k_indices(tracklet_scores, tracklet_scores.len(), None);
    let mut out = Vec::with_capacity(member_scores.len());
    for tr in order {
        let mut members = t.tracklets()[tr].members.clone();
        members.sort_unstable_by(|&a, &b| by_score_desc((member_scores[a], a), (member_scores[b], b)));
        out.extend(members.into_iter().map(|index| Ranked {
            index,
            score: tracklet_scores[tr],
        }));
    }
    out
}

/// Tracklet-ordered ranking: tracklets sorted by cosine between the query
/// and the tracklet mean, members placed back at their tracklet's rank and
/// ordered within it by direct query-member cosine.
pub fn tracklet_rerank(q: &EmbeddingMatrix, g: &EmbeddingMatrix, t: &TrackletTable) -> Result<RankList> {
    let (tg, _) = tracklet_gallery(g, t)?;
    let st = cosine_similarity(q, &tg)?;
    let sg = cosine_similarity(q, g)?;
    Ok(tracklet_rank_from_scores(&st, &sg, t))
}

fn tracklet_rank_from_scores(
    tracklet_sims: &SimilarityMatrix,
    member_sims: &SimilarityMatrix,
    t: &TrackletTable,
) -> RankList {
    let lists = (0..member_sims.n_queries())
        .into_par_iter()
        .map(|i| expand_tracklet_order(tracklet_sims.row(i), member_sims.row(i), t))
        .collect();
    RankList::from_parts_unchecked(lists, member_sims.n_gallery())
}

/// Regroups an arbitrary score matrix by tracklet: each tracklet scores the
/// mean of its members' scores and members keep their own order inside it.
/// Used to pull tracklets together after a re-ranker.
pub fn pull_in_tracklets(scores: &SimilarityMatrix, t: &TrackletTable) -> Result<RankList> {
    if t.n_rows() != scores.n_gallery() {
        return Err(Error::InvalidPartition(format!(
            "table covers {} rows, score matrix has {} columns",
            t.n_rows(),
            scores.n_gallery()
        )));
    }
    let nt = t.len();
    let mut values = Vec::with_capacity(scores.n_queries() * nt);
    for i in 0..scores.n_queries() {
        let row = scores.row(i);
        values.extend(
            t.tracklets()
                .iter()
                .map(|tr| tr.members.iter().map(|&m| row[m]).sum::<f64>() / tr.members.len() as f64),
        );
    }
    let st = SimilarityMatrix::new(values, scores.n_queries(), nt)?;
    Ok(tracklet_rank_from_scores(&st, scores, t))
}

fn qe_weight(cos: f64, alpha: f64) -> f64 {
    if cos < 0.0 {
        0.0
    } else {
        cos.powf(alpha)
    }
}

fn clamp_k(k: usize, n_gallery: usize, what: &str) -> usize {
    if k > n_gallery {
        warn!("{what}: k = {k} exceeds gallery size {n_gallery}; clamping");
    }
    k.min(n_gallery)
}

/// `q_i + sum_t g_t * max(cos(q_i, g_t), 0)^alpha` over the given neighbor lists.
fn weighted_expansion(
    q: &EmbeddingMatrix,
    g: &EmbeddingMatrix,
    sims: &SimilarityMatrix,
    neighbors: &[Vec<usize>],
    alpha: f64,
    renormalize: bool,
) -> Result<EmbeddingMatrix> {
    let d = q.dim();
    let mut data = q.as_slice().to_vec();
    data.par_chunks_mut(d).enumerate().for_each(|(i, out)| {
        for &j in &neighbors[i] {
            let w = qe_weight(sims.get(i, j), alpha);
            out.iter_mut().zip(g.row(j)).for_each(|(a, x)| *a += w * x);
        }
    });
    if renormalize {
        for (row, chunk) in data.chunks_exact_mut(d).enumerate() {
            if !normalize_in_place(chunk) {
                return Err(Error::ZeroRow { row });
            }
        }
    }
    q.with_data(data)
}

/// Tracklet-ordered alpha-weighted query expansion.
pub fn dex_expand(
    q: &EmbeddingMatrix,
    g: &EmbeddingMatrix,
    t: &TrackletTable,
    p: &DexParams,
) -> Result<EmbeddingMatrix> {
    p.validate()?;
    let k = clamp_k(p.k, g.n_rows(), "dex");
    let ranks = tracklet_rerank(q, g, t)?;
    let sims = cosine_similarity(q, g)?;
    let neighbors: Vec<Vec<usize>> = (0..q.n_rows())
        .map(|i| ranks.list(i).iter().take(k).map(|r| r.index).collect())
        .collect();
    weighted_expansion(q, g, &sims, &neighbors, p.alpha, p.renormalize)
}

fn plain_neighbors(sims: &SimilarityMatrix, k: usize) -> Vec<Vec<usize>> {
    (0..sims.n_queries())
        .into_par_iter()
        .map(|i| top_k_indices(sims.row(i), k, None))
        .collect()
}

/// Alpha-weighted query expansion over the plain cosine ranking; output renormalized.
pub fn alpha_qe_expand(q: &EmbeddingMatrix, g: &EmbeddingMatrix, k: usize, alpha: f64) -> Result<EmbeddingMatrix> {
    check_qe_params(k, alpha)?;
    let k = clamp_k(k, g.n_rows(), "alpha_qe");
    let sims = cosine_similarity(q, g)?;
    let neighbors = plain_neighbors(&sims, k);
    weighted_expansion(q, g, &sims, &neighbors, alpha, true)
}

/// Average query expansion: mean of the query and its top-k gallery neighbors, renormalized.
pub fn aqe_expand(q: &EmbeddingMatrix, g: &EmbeddingMatrix, k: usize) -> Result<EmbeddingMatrix> {
    check_qe_params(k, 0.0)?;
    let k = clamp_k(k, g.n_rows(), "aqe");
    let sims = cosine_similarity(q, g)?;
    let neighbors = plain_neighbors(&sims, k);
    let d = q.dim();
    let mut data = q.as_slice().to_vec();
    for (i, out) in data.chunks_exact_mut(d).enumerate() {
        for &j in &neighbors[i] {
            out.iter_mut().zip(g.row(j)).for_each(|(a, x)| *a += x);
        }
        let count = (neighbors[i].len() + 1) as f64;
        out.iter_mut().for_each(|a| *a /= count);
        if !normalize_in_place(out) {
            return Err(Error::ZeroRow { row: i });
        }
    }
    q.with_data(data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::l2_normalize_rows;
    use std::f64::consts::FRAC_1_SQRT_2;

    fn m(rows: &[Vec<f64>]) -> EmbeddingMatrix {
        EmbeddingMatrix::from_rows(rows).unwrap()
    }

    fn unit(rows: &[Vec<f64>]) -> EmbeddingMatrix {
        l2_normalize_rows(&m(rows)).unwrap()
    }

    fn assert_row(actual: &[f64], expected: &[f64], tol: f64) {
        for (a, e) in actual.iter().zip(expected) {
            assert!((a - e).abs() <= tol, "{actual:?} vs {expected:?}");
        }
    }

    #[test]
    fn fuse_examples() {
        let e = EnsembleInput::new(vec![m(&[vec![1.0, 0.0]]), m(&[vec![0.0, 1.0]])]).unwrap();
        assert_row(
            fuse_ensemble(&e).unwrap().row(0),
            &[FRAC_1_SQRT_2, FRAC_1_SQRT_2],
            1e-12,
        );

        let e = EnsembleInput::new(vec![m(&[vec![0.6, 0.8]])]).unwrap();
        assert_row(fuse_ensemble(&e).unwrap().row(0), &[0.6, 0.8], 1e-15);

        // mean (2/3, 1/3), norm sqrt(5)/3 -> (2, 1)/sqrt(5)
        let e = EnsembleInput::new(vec![m(&[vec![1.0, 0.0]]), m(&[vec![1.0, 0.0]]), m(&[vec![0.0, 1.0]])]).unwrap();
        assert_row(fuse_ensemble(&e).unwrap().row(0), &[0.89443, 0.44721], 1e-5);
    }

    #[test]
    fn fuse_errors() {
        assert!(EnsembleInput::new(vec![]).is_err());
        assert!(EnsembleInput::new(vec![m(&[vec![1.0, 0.0]]), m(&[vec![1.0, 0.0, 0.0]])]).is_err());
        assert!(EnsembleInput::new(vec![m(&[vec![1.0, 0.0]]), m(&[vec![1.0, 0.0], vec![0.0, 1.0]])]).is_err());
        let e = EnsembleInput::new(vec![m(&[vec![1.0, 0.0]]), m(&[vec![-1.0, 0.0]])]).unwrap();
        assert!(matches!(fuse_ensemble(&e), Err(Error::ZeroRow { row: 0 })));
    }

    #[test]
    fn tracklet_gallery_examples() {
        let g = m(&[vec![2.0, 0.0], vec![0.0, 2.0]]);
        let (tg, map) = tracklet_gallery(&g, &TrackletTable::from_labels(&["a", "a"])).unwrap();
        assert_row(tg.row(0), &[FRAC_1_SQRT_2, FRAC_1_SQRT_2], 1e-12);
        assert_eq!(map, vec![vec![0, 1]]);

        let g = m(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let (tg, map) = tracklet_gallery(&g, &TrackletTable::singletons(2)).unwrap();
        assert_eq!(tg.as_slice(), &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(map, vec![vec![0], vec![1]]);
    }

    #[test]
    fn tracklet_rerank_hand_example() {
        let q = unit(&[vec![1.0, 0.0]]);
        let g = unit(&[vec![0.8, 0.6], vec![0.99, 0.14], vec![0.0, 1.0]]);
        let t = TrackletTable::from_labels(&["A", "A", "B"]);
        let r = tracklet_rerank(&q, &g, &t).unwrap();
        assert_eq!(r.indices(0), vec![1, 0, 2]);
    }

    #[test]
    fn dex_examples() {
        let p = DexParams {
            k: 1,
            ..DexParams::default()
        };
        let q = m(&[vec![1.0, 0.0]]);

        let g = m(&[vec![0.0, 1.0]]);
        let out = dex_expand(&q, &g, &TrackletTable::singletons(1), &p).unwrap();
        assert_eq!(out.row(0), &[1.0, 0.0]);

        let g = m(&[vec![1.0, 0.0]]);
        let out = dex_expand(&q, &g, &TrackletTable::singletons(1), &p).unwrap();
        assert_eq!(out.row(0), &[1.0, 0.0]);

        let g = m(&[vec![0.6, 0.8]]);
        let raw = dex_expand(
            &q,
            &g,
            &TrackletTable::singletons(1),
            &DexParams {
                renormalize: false,
                ..p
            },
        )
        .unwrap();
        assert_row(raw.row(0), &[1.216, 0.288], 1e-12);
        let out = dex_expand(&q, &g, &TrackletTable::singletons(1), &p).unwrap();
        // (1.216, 0.288) / sqrt(1.5616)
        assert_row(out.row(0), &[0.973_080, 0.230_466], 1e-6);
    }

    #[test]
    fn dex_rejects_bad_params() {
        let q = m(&[vec![1.0, 0.0]]);
        let g = m(&[vec![1.0, 0.0]]);
        let t = TrackletTable::singletons(1);
        assert!(dex_expand(
            &q,
            &g,
            &t,
            &DexParams {
                k: 0,
                ..DexParams::default()
            }
        )
        .is_err());
        assert!(dex_expand(
            &q,
            &g,
            &t,
            &DexParams {
                alpha: -1.0,
                ..DexParams::default()
            }
        )
        .is_err());
        assert!(dex_expand(&q, &g, &TrackletTable::singletons(2), &DexParams::default()).is_err());
    }

    #[test]
    fn negative_neighbors_do_not_contribute() {
        let q = m(&[vec![1.0, 0.0]]);
        let g = m(&[vec![-1.0, 0.0]]);
        for alpha in [0.0, 0.5, 2.0] {
            assert_eq!(alpha_qe_expand(&q, &g, 1, alpha).unwrap().row(0), &[1.0, 0.0]);
        }
    }

    #[test]
    fn aqe_examples() {
        let q = m(&[vec![1.0, 0.0]]);
        assert_eq!(aqe_expand(&q, &m(&[vec![1.0, 0.0]]), 1).unwrap().row(0), &[1.0, 0.0]);
        assert_row(
            aqe_expand(&q, &m(&[vec![0.0, 1.0]]), 1).unwrap().row(0),
            &[FRAC_1_SQRT_2, FRAC_1_SQRT_2],
            1e-12,
        );
        let g = m(&[vec![0.6, 0.8], vec![0.8, 0.6]]);
        // (0.8, 1.4 / 3) / sqrt(0.64 + 1.96 / 9)
        assert_row(aqe_expand(&q, &g, 2).unwrap().row(0), &[0.863_779, 0.503_871], 1e-6);
    }

    #[test]
    fn alpha_qe_examples() {
        let q = m(&[vec![1.0, 0.0]]);
        let out = alpha_qe_expand(&q, &m(&[vec![0.0, 1.0]]), 1, 0.0).unwrap();
        assert_row(out.row(0), &[FRAC_1_SQRT_2, FRAC_1_SQRT_2], 1e-12);

        let g = m(&[vec![0.6, 0.8]]);
        let a = alpha_qe_expand(&q, &g, 1, 2.0).unwrap();
        let d = dex_expand(
            &q,
            &g,
            &TrackletTable::singletons(1),
            &DexParams {
                k: 1,
                ..DexParams::default()
            },
        )
        .unwrap();
        assert_eq!(a, d);

        let g = m(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert_eq!(alpha_qe_expand(&q, &g, 2, 2.0).unwrap().row(0), &[1.0, 0.0]);
    }

    #[test]
    fn pull_in_groups_members() {
        let s = SimilarityMatrix::from_rows(&[vec![0.9, 0.1, 0.5, 0.4]]).unwrap();
        let t = TrackletTable::from_labels(&["a", "a", "b", "b"]);
        // tracklet a mean 0.5, b mean 0.45
        let r = pull_in_tracklets(&s, &t).unwrap();
        assert_eq!(r.indices(0), vec![0, 1, 2, 3]);
    }
}
