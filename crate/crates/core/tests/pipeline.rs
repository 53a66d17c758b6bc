use std::fs;
use std::path::Path;

use dexrank::dex::EnsembleInput;
use dexrank::harness::config::{PipelineConfig, Stage};
use dexrank::harness::pipeline::{load_manifest, sha256_hex, MANIFEST_FILE, REPORT_FILE, SUBMISSION_FILE};
use dexrank::harness::{execute, rerun_from_manifest, run_pipeline, run_stages, write_dataset};
use dexrank::kreciprocal::KrParams;
use dexrank::synth::{generate, SynthDataset, SynthSpec};
use dexrank::{cosine_similarity, rank_topk, CatalogMeta, Error, MetaRecord};

fn small() -> SynthDataset {
    generate(&SynthSpec {
        n_ids: 12,
        tracklets_per_id: 3,
        images_per_tracklet: [2, 4],
        d: 16,
        n_models: 2,
        ..SynthSpec::default()
    })
    .unwrap()
}

fn single(e: &EnsembleInput) -> EnsembleInput {
    EnsembleInput::new(vec![e.members()[0].clone()]).unwrap()
}

fn with_stages(stages: &[Stage]) -> PipelineConfig {
    PipelineConfig {
        stages: stages.to_vec(),
        ..PipelineConfig::default()
    }
}

fn plain(ds: &SynthDataset) -> dexrank::RankList {
    let q = dexrank::embedding::l2_normalize_rows(&ds.query.members()[0]).unwrap();
    let g = dexrank::embedding::l2_normalize_rows(&ds.gallery.members()[0]).unwrap();
    rank_topk(&cosine_similarity(&q, &g).unwrap(), None)
}

#[test]
fn empty_chain_is_plain_cosine() {
    let ds = small();
    let (q, g) = (single(&ds.query), single(&ds.gallery));
    assert_eq!(run_stages(&with_stages(&[]), &q, &g, None).unwrap(), plain(&ds));
    assert_eq!(
        run_stages(&with_stages(&[Stage::Fuse]), &q, &g, None).unwrap(),
        plain(&ds)
    );
}

#[test]
fn kreciprocal_with_full_cosine_weight_is_plain() {
    let ds = small();
    let mut cfg = with_stages(&[Stage::Kreciprocal]);
    cfg.kreciprocal = KrParams {
        lambda: 1.0,
        ..KrParams::default()
    };
    let r = run_stages(&cfg, &single(&ds.query), &single(&ds.gallery), None).unwrap();
    assert_eq!(r, plain(&ds));
}

#[test]
fn multi_member_input_needs_fuse() {
    let ds = small();
    let err = run_stages(&with_stages(&[Stage::Dba]), &ds.query, &ds.gallery, None).unwrap_err();
    assert!(matches!(err, Error::StageOrder(_)), "{err}");
}

#[test]
fn tracklet_stages_need_metadata() {
    let ds = small();
    for stages in [vec![Stage::Fuse, Stage::Dex], vec![Stage::Fuse, Stage::TrackletRerank]] {
        let err = run_stages(&with_stages(&stages), &ds.query, &ds.gallery, None).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
        assert!(run_stages(&with_stages(&stages), &ds.query, &ds.gallery, Some(&ds.tracklets)).is_ok());
    }
}

#[test]
fn tracklet_rerank_after_reranker_keeps_tracklets_together() {
    let ds = small();
    let cfg = with_stages(&[Stage::Fuse, Stage::Kreciprocal, Stage::TrackletRerank]);
    let r = run_stages(&cfg, &ds.query, &ds.gallery, Some(&ds.tracklets)).unwrap();
    for i in 0..r.n_queries() {
        let tracks: Vec<usize> = r.indices(i).iter().map(|&j| ds.tracklets.tracklet_of(j)).collect();
        let mut runs = tracks.clone();
        runs.dedup();
        assert_eq!(runs.len(), ds.tracklets.len());
    }
}

#[test]
fn run_writes_artifacts_and_replays() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = write_dataset(&small(), &dir.path().join("data")).unwrap();
    let out = dir.path().join("out");
    let mut cfg = PipelineConfig::load(&cfg_path, &[]).unwrap();
    cfg.outputs.dir = out.clone();
    let res = run_pipeline(&cfg).unwrap();
    assert!(res.report.is_some());

    let manifest = load_manifest(&out.join(MANIFEST_FILE)).unwrap();
    assert_eq!(manifest.config, cfg);
    assert_eq!(manifest.inputs.len(), 6);
    for d in &manifest.outputs {
        assert_eq!(sha256_hex(&fs::read(out.join(&d.path)).unwrap()), d.sha256);
    }
    assert!(out.join(REPORT_FILE).exists());

    let again = dir.path().join("again");
    rerun_from_manifest(&out.join(MANIFEST_FILE), Some(&again)).unwrap();
    for f in [SUBMISSION_FILE, REPORT_FILE] {
        assert_eq!(fs::read(out.join(f)).unwrap(), fs::read(again.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn replay_rejects_changed_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let cfg_path = write_dataset(&small(), &data).unwrap();
    let mut cfg = PipelineConfig::load(&cfg_path, &[]).unwrap();
    cfg.outputs.dir = dir.path().join("out");
    run_pipeline(&cfg).unwrap();

    let csv = data.join("gallery.csv");
    let mut text = fs::read_to_string(&csv).unwrap();
    text.push('\n');
    fs::write(&csv, text).unwrap();
    let err = rerun_from_manifest(&cfg.outputs.dir.join(MANIFEST_FILE), None).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
}

#[test]
fn missing_input_is_an_io_error() {
    let mut cfg = with_stages(&[]);
    cfg.inputs.query = vec!["/nonexistent/q.f32".into()];
    cfg.inputs.gallery = vec!["/nonexistent/g.f32".into()];
    let err = execute(&cfg).unwrap_err();
    assert!(matches!(err, Error::Io { .. }), "{err}");
    assert_eq!(err.exit_code(), 2);
}

fn rewrite_identities(path: &Path, f: impl Fn(usize) -> Option<String>) {
    let meta = dexrank::harness::load_metadata(path).unwrap();
    let records: Vec<MetaRecord> = meta
        .records()
        .iter()
        .enumerate()
        .map(|(i, r)| MetaRecord {
            identity_id: f(i),
            ..r.clone()
        })
        .collect();
    dexrank::harness::save_metadata(&CatalogMeta::new(records).unwrap(), path).unwrap();
}

#[test]
fn report_is_skipped_without_usable_identities() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let cfg_path = write_dataset(&small(), &data).unwrap();

    // identities present but no query shares one with the gallery
    rewrite_identities(&data.join("query.csv"), |i| Some(format!("nobody{i}")));
    let mut cfg = PipelineConfig::load(&cfg_path, &[]).unwrap();
    cfg.outputs.dir = dir.path().join("a");
    let res = run_pipeline(&cfg).unwrap();
    assert!(res.report.is_none());
    assert!(!cfg.outputs.dir.join(REPORT_FILE).exists());
    assert_eq!(res.manifest.outputs.len(), 1);

    // no identities at all
    rewrite_identities(&data.join("query.csv"), |_| None);
    let mut cfg = PipelineConfig::load(&cfg_path, &[]).unwrap();
    cfg.outputs.dir = dir.path().join("b");
    assert!(run_pipeline(&cfg).unwrap().report.is_none());
}
