use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dexrank::harness::config::apply_overrides;
use dexrank::harness::format::{load_metadata, load_submission, to_json_pretty, write_atomic};
use dexrank::harness::{execute, rerun_from_manifest, run_pipeline, write_dataset, PipelineConfig, Stage};
use dexrank::metrics::{evaluate, EvalOptions, EvalReport, GroundTruth};
use dexrank::synth::{generate, SynthSpec};
use dexrank::{Error, Result};

/// Embedding expansion and re-ranking over precomputed descriptors.
#[derive(Parser)]
#[command(name = "dexrank", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded synthetic dataset plus a default pipeline.toml.
    Generate {
        /// Synthetic spec (TOML); defaults apply to missing keys.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Spec override, e.g. `--set n_ids=50`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Plain cosine ranking (ensemble members are fused first).
    Rank {
        #[command(flatten)]
        inputs: InputArgs,
        /// Submission file to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a chain of expansion / re-ranking stages.
    Rerank {
        #[command(flatten)]
        inputs: InputArgs,
        /// Comma-separated stages, e.g. `dex,dba,kreciprocal`; `fuse` is prepended for multi-member inputs.
        #[arg(long, value_delimiter = ',', required = true)]
        stages: Vec<String>,
        /// Parameter override, e.g. `--set kreciprocal.lambda=0.3`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Score a submission against metadata identities.
    Eval {
        #[arg(long)]
        submission: PathBuf,
        #[arg(long)]
        query_meta: PathBuf,
        #[arg(long)]
        gallery_meta: PathBuf,
        /// Evaluation option override, e.g. `--set cmc_ranks=[1,5]`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
        /// Also write the report as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Run a pipeline from a config file, or replay a manifest.
    Pipeline {
        #[arg(long, conflicts_with = "manifest", required_unless_present = "manifest")]
        config: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE", conflicts_with = "manifest")]
        sets: Vec<String>,
        /// Overrides `outputs.dir`.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

#[derive(clap::Args)]
struct InputArgs {
    /// Query embedding file; repeat once per ensemble member.
    #[arg(long, required = true)]
    query: Vec<PathBuf>,
    /// Gallery embedding file; repeat in the same member order.
    #[arg(long, required = true)]
    gallery: Vec<PathBuf>,
    #[arg(long)]
    query_meta: Option<PathBuf>,
    #[arg(long)]
    gallery_meta: Option<PathBuf>,
}

impl InputArgs {
    fn into_config(self, sets: &[String]) -> Result<PipelineConfig> {
        let mut cfg = PipelineConfig::from_toml_str("", sets)?;
        cfg.inputs.query = self.query;
        cfg.inputs.gallery = self.gallery;
        cfg.inputs.query_meta = self.query_meta;
        cfg.inputs.gallery_meta = self.gallery_meta;
        Ok(cfg)
    }
}

fn parse_stage(name: &str) -> Result<Stage> {
    toml::Value::String(name.trim().to_string())
        .try_into()
        .map_err(|_| Error::Config(format!("unknown stage `{name}`")))
}

fn leading_fuse(mut stages: Vec<Stage>, n_members: usize) -> Vec<Stage> {
    if n_members > 1 && stages.first() != Some(&Stage::Fuse) {
        stages.insert(0, Stage::Fuse);
    }
    stages
}

fn print_report(report: &Option<EvalReport>) {
    if let Some(r) = report {
        print!("{r}");
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { spec, sets, out } => {
            let text = match &spec {
                Some(p) => std::fs::read_to_string(p).map_err(|e| Error::Io {
                    path: p.clone(),
                    source: e,
                })?,
                None => String::new(),
            };
            let mut table: toml::Table = toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
            apply_overrides(&mut table, &sets)?;
            let spec: SynthSpec = toml::Value::Table(table)
                .try_into()
                .map_err(|e: toml::de::Error| Error::InvalidSpec(e.to_string()))?;
            let path = write_dataset(&generate(&spec)?, &out)?;
            println!("{}", path.display());
        }
        Command::Rank { inputs, out } => {
            let mut cfg = inputs.into_config(&[])?;
            cfg.stages = leading_fuse(Vec::new(), cfg.inputs.query.len());
            let res = execute(&cfg)?;
            write_atomic(&out, res.submission.as_bytes())?;
            print_report(&res.report);
        }
        Command::Rerank {
            inputs,
            stages,
            sets,
            out_dir,
        } => {
            let mut cfg = inputs.into_config(&sets)?;
            let stages = stages.iter().map(|s| parse_stage(s)).collect::<Result<Vec<_>>>()?;
            cfg.stages = leading_fuse(stages, cfg.inputs.query.len());
            cfg.outputs.dir = out_dir;
            print_report(&run_pipeline(&cfg)?.report);
        }
        Command::Eval {
            submission,
            query_meta,
            gallery_meta,
            sets,
            json,
        } => {
            let mut table = toml::Table::new();
            apply_overrides(&mut table, &sets)?;
            let opts: EvalOptions = toml::Value::Table(table)
                .try_into()
                .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
            let qm = load_metadata(&query_meta)?;
            let gm = load_metadata(&gallery_meta)?;
            let gallery_ids: Vec<String> = gm.image_ids().map(str::to_string).collect();
            let ranks = load_submission(&submission, &gallery_ids)?;
            let report = evaluate(&ranks, &GroundTruth::from_meta(&qm, &gm)?, &opts)?;
            print!("{report}");
            if let Some(p) = json {
                write_atomic(&p, &to_json_pretty(&report))?;
            }
        }
        Command::Pipeline {
            config,
            manifest,
            sets,
            out_dir,
        } => {
            let res = match (config, manifest) {
                (_, Some(m)) => rerun_from_manifest(&m, out_dir.as_deref())?,
                (Some(c), None) => {
                    let mut cfg = PipelineConfig::load(&c, &sets)?;
                    if let Some(d) = out_dir {
                        cfg.outputs.dir = d;
                    }
                    run_pipeline(&cfg)?
                }
                (None, None) => unreachable!("clap requires --config or --manifest"),
            };
            print_report(&res.report);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
