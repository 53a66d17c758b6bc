//! Retrieval evaluation: average precision, mAP, mAP@K and CMC@k.

use std::collections::BTreeMap;
use std::fmt;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::meta::CatalogMeta;
use crate::rank::RankList;

/// Identity (and optional camera) labels of queries and gallery rows.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroundTruth {
    query_identity: Vec<String>,
    gallery_identity: Vec<String>,
    query_camera: Vec<Option<String>>,
    gallery_camera: Vec<Option<String>>,
}

impl GroundTruth {
    pub fn new(query_identity: Vec<String>, gallery_identity: Vec<String>) -> Self {
        let (nq, ng) = (query_identity.len(), gallery_identity.len());
        Self {
            query_identity,
            gallery_identity,
            query_camera: vec![None; nq],
            gallery_camera: vec![None; ng],
        }
    }

    pub fn from_meta(query: &CatalogMeta, gallery: &CatalogMeta) -> Result<Self> {
        let labels = |m: &CatalogMeta, what: &str| -> Result<Vec<String>> {
            m.records()
                .iter()
                .map(|r| {
                    r.identity_id
                        .clone()
                        .ok_or_else(|| Error::Metadata(format!("{what} image `{}` has no identity_id", r.image_id)))
                })
                .collect()
        };
        Ok(Self {
            query_identity: labels(query, "query")?,
            gallery_identity: labels(gallery, "gallery")?,
            query_camera: query.records().iter().map(|r| r.camera_id.clone()).collect(),
            gallery_camera: gallery.records().iter().map(|r| r.camera_id.clone()).collect(),
        })
    }

    pub fn n_queries(&self) -> usize {
        self.query_identity.len()
    }

    pub fn n_gallery(&self) -> usize {
        self.gallery_identity.len()
    }

    fn is_relevant(&self, q: usize, g: usize) -> bool {
        self.query_identity[q] == self.gallery_identity[g]
    }

    /// Same identity seen by the same camera; dropped under camera filtering.
    fn is_junk(&self, q: usize, g: usize) -> bool {
        self.is_relevant(q, g) && self.query_camera[q].is_some() && self.query_camera[q] == self.gallery_camera[g]
    }
}

/// Denominator of truncated average precision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CutoffDenominator {
    /// All relevant gallery items, so that mAP@K <= mAP.
    #[default]
    Full,
    /// `min(total_relevant, K)`.
    MinWithCutoff,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    pub cmc_ranks: Vec<usize>,
    pub map_cutoffs: Vec<usize>,
    pub same_camera_filter: bool,
    pub cutoff_denominator: CutoffDenominator,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            cmc_ranks: vec![1, 5, 10],
            map_cutoffs: vec![100],
            same_camera_filter: false,
            cutoff_denominator: CutoffDenominator::Full,
        }
    }
}

/// Average precision of one ranked relevance list: the sum of precision at
/// each hit, divided by `total_relevant`. Relevant items missing from the
/// list contribute nothing.
pub fn average_precision(ranked_relevance: &[bool], total_relevant: usize) -> Result<f64> {
    if total_relevant == 0 {
        return Err(Error::NoRelevant);
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (pos, &rel) in ranked_relevance.iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (pos + 1) as f64;
        }
    }
    Ok(sum / total_relevant as f64)
}

/// 1-based rank of the first relevant item, if any.
pub fn first_hit(ranked_relevance: &[bool]) -> Option<usize> {
    ranked_relevance.iter().position(|&r| r).map(|p| p + 1)
}

struct QueryRelevance {
    ranked: Vec<bool>,
    total_relevant: usize,
}

fn query_relevance(ranks: &RankList, truth: &GroundTruth, q: usize, camera_filter: bool) -> QueryRelevance {
    let keep = |g: usize| !(camera_filter && truth.is_junk(q, g));
    let ranked = ranks
        .list(q)
        .iter()
        .filter(|r| keep(r.index))
        .map(|r| truth.is_relevant(q, r.index))
        .collect();
    let total_relevant = (0..truth.n_gallery())
        .filter(|&g| keep(g) && truth.is_relevant(q, g))
        .count();
    QueryRelevance { ranked, total_relevant }
}

fn check_shapes(ranks: &RankList, truth: &GroundTruth) -> Result<()> {
    if ranks.n_queries() != truth.n_queries() {
        return Err(Error::DimensionMismatch {
            expected: truth.n_queries(),
            found: ranks.n_queries(),
        });
    }
    if ranks.n_gallery() != truth.n_gallery() {
        return Err(Error::DimensionMismatch {
            expected: truth.n_gallery(),
            found: ranks.n_gallery(),
        });
    }
    if ranks.n_queries() == 0 {
        return Err(Error::EmptyEval);
    }
    Ok(())
}

/// Fraction of scorable queries whose first relevant item is within the top `k`.
pub fn cmc_at(ranks: &RankList, truth: &GroundTruth, k: usize) -> Result<f64> {
    check_shapes(ranks, truth)?;
    let mut scored = 0usize;
    let mut hits = 0usize;
    for q in 0..ranks.n_queries() {
        let rel = query_relevance(ranks, truth, q, false);
        if rel.total_relevant == 0 {
            continue;
        }
        scored += 1;
        if first_hit(&rel.ranked).is_some_and(|r| r <= k) {
            hits += 1;
        }
    }
    if scored == 0 {
        return Err(Error::EmptyEval);
    }
    Ok(hits as f64 / scored as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub map_full: f64,
    pub map_at_k: BTreeMap<usize, f64>,
    pub cmc: BTreeMap<usize, f64>,
    /// Aligned with the queries; `None` for queries without relevant items.
    pub per_query_ap: Vec<Option<f64>>,
    pub n_queries: usize,
    pub n_excluded: usize,
}

pub fn evaluate(ranks: &RankList, truth: &GroundTruth, opts: &EvalOptions) -> Result<EvalReport> {
    check_shapes(ranks, truth)?;
    if opts.cmc_ranks.contains(&0) || opts.map_cutoffs.contains(&0) {
        return Err(Error::InvalidParam("CMC ranks and mAP cutoffs must be >= 1".into()));
    }
    let mut per_query_ap = Vec::with_capacity(ranks.n_queries());
    let mut ap_sum = 0.0;
    let mut cut_sums = vec![0.0; opts.map_cutoffs.len()];
    let mut cmc_hits = vec![0usize; opts.cmc_ranks.len()];
    let mut scored = 0usize;
    for q in 0..ranks.n_queries() {
        let rel = query_relevance(ranks, truth, q, opts.same_camera_filter);
        let Ok(ap) = average_precision(&rel.ranked, rel.total_relevant) else {
            per_query_ap.push(None);
            continue;
        };
        scored += 1;
        ap_sum += ap;
        per_query_ap.push(Some(ap));
        for (sum, &k) in cut_sums.iter_mut().zip(&opts.map_cutoffs) {
            let denom = match opts.cutoff_denominator {
                CutoffDenominator::Full => rel.total_relevant,
                CutoffDenominator::MinWithCutoff => rel.total_relevant.min(k),
            };
            *sum += average_precision(&rel.ranked[..k.min(rel.ranked.len())], denom)?;
        }
        let hit = first_hit(&rel.ranked);
        for (h, &k) in cmc_hits.iter_mut().zip(&opts.cmc_ranks) {
            if hit.is_some_and(|r| r <= k) {
                *h += 1;
            }
        }
    }
    let n_excluded = ranks.n_queries() - scored;
    if scored == 0 {
        return Err(Error::EmptyEval);
    }
    if n_excluded > 0 {
        warn!("evaluation: {n_excluded} queries without relevant gallery items were excluded");
    }
    let n = scored as f64;
    Ok(EvalReport {
        map_full: ap_sum / n,
        map_at_k: opts
            .map_cutoffs
            .iter()
            .zip(cut_sums)
            .map(|(&k, s)| (k, s / n))
            .collect(),
        cmc: opts
            .cmc_ranks
            .iter()
            .zip(cmc_hits)
            .map(|(&k, h)| (k, h as f64 / n))
            .collect(),
        per_query_ap,
        n_queries: ranks.n_queries(),
        n_excluded,
    })
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "queries   {} ({} excluded)", self.n_queries, self.n_excluded)?;
        writeln!(f, "mAP       {:.4}", self.map_full)?;
        for (k, v) in &self.map_at_k {
            writeln!(f, "mAP@{k:<5} {v:.4}")?;
        }
        for (k, v) in &self.cmc {
            writeln!(f, "CMC@{k:<5} {v:.4}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rank::Ranked;

    fn rel(bits: &[u8]) -> Vec<bool> {
        bits.iter().map(|&b| b == 1).collect()
    }

    #[test]
    fn ap_examples() {
        assert!((average_precision(&rel(&[1, 0, 1, 0]), 2).unwrap() - 0.833_333_333_333_333_4).abs() < 1e-12);
        assert_eq!(average_precision(&rel(&[1, 1, 1]), 3).unwrap(), 1.0);
        assert!((average_precision(&rel(&[0, 0, 1]), 1).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!(matches!(average_precision(&rel(&[0, 0]), 0), Err(Error::NoRelevant)));
    }

    fn ranks_from(orders: &[Vec<usize>], ng: usize) -> RankList {
        let lists = orders
            .iter()
            .map(|o| {
                o.iter()
                    .enumerate()
                    .map(|(p, &index)| Ranked {
                        index,
                        score: -(p as f64),
                    })
                    .collect()
            })
            .collect();
        RankList::new(lists, ng).unwrap()
    }

    fn ids(s: &[&str]) -> Vec<String> {
        s.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn cmc_examples() {
        // relevant item at rank 3
        let truth = GroundTruth::new(ids(&["a"]), ids(&["b", "c", "a", "d", "e"]));
        let r = ranks_from(&[vec![0, 1, 2, 3, 4]], 5);
        assert_eq!(cmc_at(&r, &truth, 1).unwrap(), 0.0);
        assert_eq!(cmc_at(&r, &truth, 5).unwrap(), 1.0);

        let truth = GroundTruth::new(ids(&["a", "b"]), ids(&["a", "b"]));
        let r = ranks_from(&[vec![0, 1], vec![1, 0]], 2);
        for k in [1, 2, 10] {
            assert_eq!(cmc_at(&r, &truth, k).unwrap(), 1.0);
        }

        let gallery: Vec<String> = (0..8)
            .map(|i| if i == 6 { "y".into() } else { format!("n{i}") })
            .collect();
        let mut gallery_all = gallery.clone();
        gallery_all[0] = "x".into();
        let truth = GroundTruth::new(ids(&["x", "y"]), gallery_all);
        let r = ranks_from(&[(0..8).collect(), (0..8).collect()], 8);
        assert_eq!(cmc_at(&r, &truth, 5).unwrap(), 0.5);
    }

    #[test]
    fn evaluate_examples() {
        let truth = GroundTruth::new(ids(&["a"]), ids(&["a", "b", "a", "c"]));
        let r = ranks_from(&[vec![0, 1, 2, 3]], 4);
        let rep = evaluate(&r, &truth, &EvalOptions::default()).unwrap();
        assert!((rep.map_full - 0.83333).abs() < 1e-5);
        assert_eq!(rep.cmc[&1], 1.0);
        assert_eq!(rep.map_at_k[&100], rep.map_full);

        let empty = GroundTruth::new(vec![], ids(&["a"]));
        assert!(matches!(
            evaluate(&RankList::new(vec![], 1).unwrap(), &empty, &EvalOptions::default()),
            Err(Error::EmptyEval)
        ));
    }

    #[test]
    fn queries_without_matches_are_excluded() {
        let truth = GroundTruth::new(ids(&["a", "z"]), ids(&["a", "b"]));
        let r = ranks_from(&[vec![0, 1], vec![0, 1]], 2);
        let rep = evaluate(&r, &truth, &EvalOptions::default()).unwrap();
        assert_eq!(rep.n_excluded, 1);
        assert_eq!(rep.per_query_ap, vec![Some(1.0), None]);
        assert_eq!(rep.map_full, 1.0);

        let none = GroundTruth::new(ids(&["z"]), ids(&["a"]));
        assert!(matches!(
            evaluate(&ranks_from(&[vec![0]], 1), &none, &EvalOptions::default()),
            Err(Error::EmptyEval)
        ));
    }

    #[test]
    fn truncation_and_denominators() {
        let truth = GroundTruth::new(ids(&["a"]), ids(&["b", "a", "a", "a"]));
        let r = ranks_from(&[vec![0, 1, 2, 3]], 4);
        let opts = EvalOptions {
            map_cutoffs: vec![2],
            ..EvalOptions::default()
        };
        let rep = evaluate(&r, &truth, &opts).unwrap();
        assert!((rep.map_at_k[&2] - 0.5 / 3.0).abs() < 1e-15);
        assert!(rep.map_at_k[&2] <= rep.map_full);

        let opts = EvalOptions {
            map_cutoffs: vec![2],
            cutoff_denominator: CutoffDenominator::MinWithCutoff,
            ..EvalOptions::default()
        };
        let rep = evaluate(&r, &truth, &opts).unwrap();
        assert!((rep.map_at_k[&2] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn camera_filter_drops_same_camera_matches() {
        let mut truth = GroundTruth::new(ids(&["a"]), ids(&["a", "b", "a"]));
        truth.query_camera = vec![Some("c1".into())];
        truth.gallery_camera = vec![Some("c1".into()), Some("c1".into()), Some("c2".into())];
        let r = ranks_from(&[vec![0, 1, 2]], 3);
        let plain = evaluate(&r, &truth, &EvalOptions::default()).unwrap();
        assert!((plain.map_full - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
        let opts = EvalOptions {
            same_camera_filter: true,
            ..EvalOptions::default()
        };
        let filtered = evaluate(&r, &truth, &opts).unwrap();
        // remaining list [b, a@c2]: hit at rank 2 of 1 relevant
        assert!((filtered.map_full - 0.5).abs() < 1e-15);
    }

    #[test]
    fn report_renders() {
        let truth = GroundTruth::new(ids(&["a"]), ids(&["a"]));
        let rep = evaluate(&ranks_from(&[vec![0]], 1), &truth, &EvalOptions::default()).unwrap();
        let text = rep.to_string();
        assert!(text.contains("mAP       1.0000"));
        let json = serde_json::to_string(&rep).unwrap();
        let back: EvalReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, rep);
    }
}
