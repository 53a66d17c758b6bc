//! File formats, configuration and pipeline composition.

pub mod config;
pub mod format;
pub mod pipeline;

use std::fs;
use std::path::{Path, PathBuf};

pub use config::{PipelineConfig, Stage};
pub use format::{emit_submission, load_embeddings, load_metadata, load_submission, save_embeddings, save_metadata};
pub use pipeline::{execute, rerun_from_manifest, run_pipeline, run_stages, Manifest, PipelineOutput};

use crate::error::{Error, Result};
use crate::synth::SynthDataset;

/// Writes a synthetic dataset as `query_m<i>.f32`, `gallery_m<i>.f32`,
/// `query.csv`, `gallery.csv` and a default `pipeline.toml` that refers to
/// them by relative path. Returns the path of `pipeline.toml`.
pub fn write_dataset(ds: &SynthDataset, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut cfg = PipelineConfig::default();
    for (i, (q, g)) in ds.query.members().iter().zip(ds.gallery.members()).enumerate() {
        let (qn, gn) = (format!("query_m{i}.f32"), format!("gallery_m{i}.f32"));
        save_embeddings(q, &dir.join(&qn))?;
        save_embeddings(g, &dir.join(&gn))?;
        cfg.inputs.query.push(qn.into());
        cfg.inputs.gallery.push(gn.into());
    }
    save_metadata(&ds.query_meta, &dir.join("query.csv"))?;
    save_metadata(&ds.gallery_meta, &dir.join("gallery.csv"))?;
    cfg.inputs.query_meta = Some("query.csv".into());
    cfg.inputs.gallery_meta = Some("gallery.csv".into());
    let path = dir.join("pipeline.toml");
    format::write_atomic(&path, cfg.to_toml().as_bytes())?;
    Ok(path)
}
