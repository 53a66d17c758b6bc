//! Stage execution and run artifacts.
//!
//! A run writes three files into `outputs.dir`: `submission.txt`,
//! `report.json` (only when both metadata files carry identities) and
//! `manifest.json`, which holds the resolved config plus SHA-256 digests of
//! every input and output. [`rerun_from_manifest`] checks the input digests
//! and replays the run.

use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{PipelineConfig, Stage};
use super::format::{load_embeddings, load_metadata, read, submission_text, to_json_pretty, write_atomic};
use crate::dba::dba_augment;
use crate::dex::{
    alpha_qe_expand, aqe_expand, dex_expand, fuse_ensemble, pull_in_tracklets, tracklet_rerank, EnsembleInput,
};
use crate::diffusion::{diffusion_scores, rank_with_fallback};
use crate::embedding::{l2_normalize_rows, EmbeddingMatrix};
use crate::error::{Error, Result};
use crate::kreciprocal::krerank_distances;
use crate::meta::{CatalogMeta, TrackletTable};
use crate::metrics::{evaluate, EvalReport, GroundTruth};
use crate::rank::{rank_topk, RankList};
use crate::similarity::{cosine_similarity, SimilarityMatrix};

pub const SUBMISSION_FILE: &str = "submission.txt";
pub const REPORT_FILE: &str = "report.json";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: String,
    pub config: PipelineConfig,
    pub inputs: Vec<FileDigest>,
    /// Paths relative to `config.outputs.dir`.
    pub outputs: Vec<FileDigest>,
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub ranks: RankList,
    pub report: Option<EvalReport>,
    pub submission: String,
    pub manifest: Manifest,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn first_member(e: &EnsembleInput) -> &EmbeddingMatrix {
    &e.members()[0]
}

/// Runs `cfg.stages` on in-memory data. Without `fuse` the single member is
/// L2-normalized. `tracklets` partitions the gallery and is required by
/// `dex` and `tracklet_rerank`. With no re-ranking stage the result is the
/// plain cosine ranking of the (expanded) descriptors.
pub fn run_stages(
    cfg: &PipelineConfig,
    query: &EnsembleInput,
    gallery: &EnsembleInput,
    tracklets: Option<&TrackletTable>,
) -> Result<RankList> {
    if query.len() != gallery.len() {
        return Err(Error::InconsistentEnsemble(format!(
            "{} query members but {} gallery members",
            query.len(),
            gallery.len()
        )));
    }
    cfg.validate_stages(query.len())?;
    let need_tracklets = |stage: Stage| {
        tracklets.ok_or_else(|| {
            Error::Config(format!(
                "stage `{}` needs gallery metadata with tracklet ids",
                stage.name()
            ))
        })
    };
    let (mut q, mut g) = if cfg.stages.first() == Some(&Stage::Fuse) {
        (fuse_ensemble(query)?, fuse_ensemble(gallery)?)
    } else {
        (
            l2_normalize_rows(first_member(query))?,
            l2_normalize_rows(first_member(gallery))?,
        )
    };
    let mut scores: Option<SimilarityMatrix> = None;
    let mut ranks: Option<RankList> = None;
    for &stage in &cfg.stages {
        info!("stage {}", stage.name());
        match stage {
            Stage::Fuse => {}
            Stage::Dex => q = dex_expand(&q, &g, need_tracklets(stage)?, &cfg.dex)?,
            Stage::Aqe => q = aqe_expand(&q, &g, cfg.aqe.k)?,
            Stage::AlphaQe => q = alpha_qe_expand(&q, &g, cfg.alpha_qe.k, cfg.alpha_qe.alpha)?,
            Stage::Dba => g = dba_augment(&g, &cfg.dba)?,
            Stage::Kreciprocal => {
                let s = krerank_distances(&q, &g, &cfg.kreciprocal)?.blended_scores();
                ranks = Some(rank_topk(&s, None));
                scores = Some(s);
            }
            Stage::Diffusion => {
                let (s, _) = diffusion_scores(&q, &g, &cfg.diffusion)?;
                ranks = Some(rank_with_fallback(&s, &cosine_similarity(&q, &g)?));
                scores = Some(s);
            }
            Stage::TrackletRerank => {
                let t = need_tracklets(stage)?;
                ranks = Some(match &scores {
                    Some(s) => pull_in_tracklets(s, t)?,
                    None => tracklet_rerank(&q, &g, t)?,
                });
            }
        }
    }
    match ranks {
        Some(r) => Ok(r),
        None => Ok(rank_topk(&cosine_similarity(&q, &g)?, None)),
    }
}

fn load_members(paths: &[PathBuf]) -> Result<EnsembleInput> {
    if paths.is_empty() {
        return Err(Error::Config("no input embedding files".into()));
    }
    EnsembleInput::new(paths.iter().map(|p| load_embeddings(p)).collect::<Result<Vec<_>>>()?)
}

fn load_aligned_meta(path: &Option<PathBuf>, ids: &[String]) -> Result<Option<CatalogMeta>> {
    path.as_ref().map(|p| load_metadata(p)?.align_to(ids)).transpose()
}

/// Loads inputs, runs the stages and evaluates, without writing anything.
pub fn execute(cfg: &PipelineConfig) -> Result<PipelineOutput> {
    cfg.validate()?;
    let inputs = cfg
        .inputs
        .all_paths()
        .into_iter()
        .map(|p| {
            Ok(FileDigest {
                path: p.to_path_buf(),
                sha256: sha256_hex(&read(p)?),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let query = load_members(&cfg.inputs.query)?;
    let gallery = load_members(&cfg.inputs.gallery)?;
    let gallery_ids = first_member(&gallery).row_ids().to_vec();
    let query_meta = load_aligned_meta(&cfg.inputs.query_meta, first_member(&query).row_ids())?;
    let gallery_meta = load_aligned_meta(&cfg.inputs.gallery_meta, &gallery_ids)?;
    let tracklets = gallery_meta.as_ref().map(CatalogMeta::tracklet_table);

    let ranks = run_stages(cfg, &query, &gallery, tracklets.as_ref())?;

    let report = match (&query_meta, &gallery_meta) {
        (Some(qm), Some(gm)) if qm.has_identities() && gm.has_identities() => {
            match evaluate(&ranks, &GroundTruth::from_meta(qm, gm)?, &cfg.eval) {
                Ok(r) => Some(r),
                Err(Error::EmptyEval) => {
                    warn!("no query has a relevant gallery item; skipping evaluation");
                    None
                }
                Err(e) => return Err(e),
            }
        }
        _ => None,
    };
    let submission = submission_text(&ranks, &gallery_ids)?;
    let mut outputs = vec![FileDigest {
        path: SUBMISSION_FILE.into(),
        sha256: sha256_hex(submission.as_bytes()),
    }];
    if let Some(r) = &report {
        outputs.push(FileDigest {
            path: REPORT_FILE.into(),
            sha256: sha256_hex(&to_json_pretty(r)),
        });
    }
    Ok(PipelineOutput {
        ranks,
        report,
        submission,
        manifest: Manifest {
            version: env!("CARGO_PKG_VERSION").into(),
            config: cfg.clone(),
            inputs,
            outputs,
        },
    })
}

/// [`execute`], then writes the submission, report and manifest into `cfg.outputs.dir`.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<PipelineOutput> {
    let out = execute(cfg)?;
    let dir = &cfg.outputs.dir;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_atomic(&dir.join(SUBMISSION_FILE), out.submission.as_bytes())?;
    if let Some(r) = &out.report {
        write_atomic(&dir.join(REPORT_FILE), &to_json_pretty(r))?;
    }
    write_atomic(&dir.join(MANIFEST_FILE), &to_json_pretty(&out.manifest))?;
    Ok(out)
}

pub fn load_manifest(path: &Path) -> Result<Manifest> {
    serde_json::from_slice(&read(path)?).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// Replays the run recorded in a manifest, optionally into another output
/// directory. Fails if any input no longer matches its recorded digest.
pub fn rerun_from_manifest(path: &Path, outputs_dir: Option<&Path>) -> Result<PipelineOutput> {
    let manifest = load_manifest(path)?;
    for d in &manifest.inputs {
        if sha256_hex(&read(&d.path)?) != d.sha256 {
            return Err(Error::Config(format!(
                "input {} changed since the manifest was written",
                d.path.display()
            )));
        }
    }
    let mut cfg = manifest.config;
    if let Some(dir) = outputs_dir {
        cfg.outputs.dir = dir.to_path_buf();
    }
    run_pipeline(&cfg)
}
