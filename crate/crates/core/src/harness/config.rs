//! Pipeline configuration (TOML).
//!
//! Every section is optional and falls back to its defaults. Relative input
//! paths in a config file are resolved against the file's directory.
//! Overrides use dotted keys with TOML values, e.g. `dex.k=10`,
//! `stages=["fuse","kreciprocal"]`, `inputs.query_meta="q.csv"`; values that
//! do not parse as TOML are taken as strings.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dba::DbaParams;
use crate::dex::DexParams;
use crate::diffusion::DiffusionParams;
use crate::error::{Error, Result};
use crate::kreciprocal::KrParams;
use crate::metrics::EvalOptions;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Fuse,
    TrackletRerank,
    Dex,
    Aqe,
    AlphaQe,
    Dba,
    Kreciprocal,
    Diffusion,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Fuse => "fuse",
            Stage::TrackletRerank => "tracklet_rerank",
            Stage::Dex => "dex",
            Stage::Aqe => "aqe",
            Stage::AlphaQe => "alpha_qe",
            Stage::Dba => "dba",
            Stage::Kreciprocal => "kreciprocal",
            Stage::Diffusion => "diffusion",
        }
    }

    fn is_expansion(self) -> bool {
        matches!(self, Stage::Dex | Stage::Aqe | Stage::AlphaQe | Stage::Dba)
    }

    fn is_reranker(self) -> bool {
        matches!(self, Stage::Kreciprocal | Stage::Diffusion)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AqeParams {
    pub k: usize,
}

impl Default for AqeParams {
    fn default() -> Self {
        Self { k: 20 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlphaQeParams {
    pub k: usize,
    pub alpha: f64,
}

impl Default for AlphaQeParams {
    fn default() -> Self {
        Self { k: 20, alpha: 2.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Inputs {
    /// One embedding file per ensemble member, all over the same query images.
    pub query: Vec<PathBuf>,
    /// Gallery members, in the same member order as `query`.
    pub gallery: Vec<PathBuf>,
    pub query_meta: Option<PathBuf>,
    /// Supplies tracklet ids (needed by `dex` and `tracklet_rerank`) and identities.
    pub gallery_meta: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Outputs {
    pub dir: PathBuf,
}

impl Default for Outputs {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("out"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub stages: Vec<Stage>,
    /// Recorded in the manifest; none of the stages draws random numbers.
    pub seed: u64,
    pub inputs: Inputs,
    pub outputs: Outputs,
    pub dex: DexParams,
    pub aqe: AqeParams,
    pub alpha_qe: AlphaQeParams,
    pub dba: DbaParams,
    pub kreciprocal: KrParams,
    pub diffusion: DiffusionParams,
    pub eval: EvalOptions,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            stages: vec![Stage::Fuse, Stage::Dex, Stage::Dba, Stage::Kreciprocal],
            seed: 0,
            inputs: Inputs::default(),
            outputs: Outputs::default(),
            dex: DexParams::default(),
            aqe: AqeParams::default(),
            alpha_qe: AlphaQeParams::default(),
            dba: DbaParams::default(),
            kreciprocal: KrParams::default(),
            diffusion: DiffusionParams::default(),
            eval: EvalOptions::default(),
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Applies `key=value` overrides to a parsed TOML document.
pub fn apply_overrides(table: &mut toml::Table, overrides: &[String]) -> Result<()> {
    for o in overrides {
        let (key, raw) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
        let parts: Vec<&str> = key.trim().split('.').collect();
        if parts.iter().any(|p| p.is_empty()) {
            return Err(Error::Config(format!("bad override key `{key}`")));
        }
        let mut cur = &mut *table;
        for p in &parts[..parts.len() - 1] {
            let entry = cur
                .entry(p.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            cur = entry
                .as_table_mut()
                .ok_or_else(|| Error::Config(format!("override `{key}`: `{p}` is not a table")))?;
        }
        cur.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    }
    Ok(())
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        apply_overrides(&mut table, overrides)?;
        toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))
    }

    /// Reads a config file, applies overrides and resolves relative input
    /// paths against the file's directory.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text, overrides)?;
        if let Some(base) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            cfg.inputs.resolve_against(base);
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Checks stage order and stage parameters. File existence is checked when the run loads its inputs.
    pub fn validate(&self) -> Result<()> {
        if self.inputs.query.len() != self.inputs.gallery.len() {
            return Err(Error::Config(format!(
                "{} query members but {} gallery members",
                self.inputs.query.len(),
                self.inputs.gallery.len()
            )));
        }
        self.validate_stages(self.inputs.query.len())
    }

    pub(crate) fn validate_stages(&self, n_members: usize) -> Result<()> {
        validate_stage_order(&self.stages, n_members)?;
        for s in &self.stages {
            match s {
                Stage::Dex => self.dex.validate()?,
                Stage::Aqe if self.aqe.k == 0 => return Err(Error::InvalidParam("aqe k must be >= 1".into())),
                Stage::AlphaQe if self.alpha_qe.k == 0 || self.alpha_qe.alpha.is_nan() || self.alpha_qe.alpha < 0.0 => {
                    return Err(Error::InvalidParam("alpha_qe needs k >= 1 and alpha >= 0".into()))
                }
                Stage::Dba => self.dba.validate()?,
                Stage::Kreciprocal => self.kreciprocal.validate()?,
                Stage::Diffusion => self.diffusion.validate()?,
                _ => {}
            }
        }
        Ok(())
    }
}

impl Inputs {
    fn resolve_against(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        self.query.iter_mut().for_each(fix);
        self.gallery.iter_mut().for_each(fix);
        self.query_meta.iter_mut().for_each(fix);
        self.gallery_meta.iter_mut().for_each(fix);
    }

    pub fn all_paths(&self) -> Vec<&Path> {
        self.query
            .iter()
            .chain(&self.gallery)
            .chain(&self.query_meta)
            .chain(&self.gallery_meta)
            .map(PathBuf::as_path)
            .collect()
    }
}

/// `fuse` first (and required for multi-member inputs); expansions before the
/// re-ranker; at most one of `kreciprocal` / `diffusion`; `tracklet_rerank`
/// last; no stage twice.
pub fn validate_stage_order(stages: &[Stage], n_members: usize) -> Result<()> {
    let err = |m: String| Err(Error::StageOrder(m));
    let mut seen = HashSet::new();
    let mut reranker: Option<Stage> = None;
    for (i, &s) in stages.iter().enumerate() {
        if !seen.insert(s) {
            return err(format!("`{}` appears twice", s.name()));
        }
        if s == Stage::Fuse && i != 0 {
            return err("`fuse` must be the first stage".into());
        }
        if s == Stage::TrackletRerank && i + 1 != stages.len() {
            return err("`tracklet_rerank` must be the last stage".into());
        }
        if s.is_expansion() {
            if let Some(r) = reranker {
                return err(format!("`{}` cannot follow the re-ranker `{}`", s.name(), r.name()));
            }
        }
        if s.is_reranker() {
            if let Some(r) = reranker {
                return err(format!("`{}` and `{}` cannot be chained", r.name(), s.name()));
            }
            reranker = Some(s);
        }
    }
    if n_members > 1 && !seen.contains(&Stage::Fuse) {
        return err(format!("{n_members} ensemble members need a leading `fuse` stage"));
    }
    Ok(())
}
