//! Batch front-end for `bhchain`: JSON configuration, experiment
//! orchestration and CSV/JSON outputs with a checksummed run manifest.

pub mod commands;
pub mod config;
pub mod output;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::Value;
use thiserror::Error;

use config::{apply_overrides, Experiment, RunConfig};
use output::{unix_now, OutputDir, RunManifest, RunStatus};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("i/o error: {0}")]
    Io(String),
}

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_NUMERICAL: i32 = 2;
pub const EXIT_PARTIAL: i32 = 3;

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Numerical(_) | CliError::Io(_) => EXIT_NUMERICAL,
        }
    }
}

/// Environment variable used when `--workers` is not given.
pub const WORKERS_ENV: &str = "BHCHAIN_WORKERS";

#[derive(Debug, Parser)]
#[command(name = "bhchain", version, about = "Classical Bose-Hubbard chain experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Single orbit: orbit.csv
    Orbit(CommonArgs),
    /// Lyapunov exponents over a (U/J, mu/J) grid: lyapunov.csv
    Lyapunov(CommonArgs),
    /// Ensemble variance, fits and predictions
    Ensemble(CommonArgs),
    /// Ensemble fits over a (U/J, mu/J) grid: sweep.csv
    Sweep(CommonArgs),
    /// Closed-form predictions, diffusion table, DNSE comparison
    Theory(CommonArgs),
}

impl Command {
    fn parts(&self) -> (Experiment, &CommonArgs) {
        match self {
            Command::Orbit(a) => (Experiment::Orbit, a),
            Command::Lyapunov(a) => (Experiment::Lyapunov, a),
            Command::Ensemble(a) => (Experiment::Ensemble, a),
            Command::Sweep(a) => (Experiment::Sweep, a),
            Command::Theory(a) => (Experiment::Theory, a),
        }
    }
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// JSON run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory (overrides `output`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads; defaults to $BHCHAIN_WORKERS, then the config, then 1.
    #[arg(long)]
    pub workers: Option<usize>,
    /// Config overrides such as `--chain.interaction=25`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY=VALUE")]
    pub overrides: Vec<String>,
}

/// Merges file, overrides and flags into a validated configuration.
pub fn resolve_config(experiment: Experiment, args: &CommonArgs) -> Result<RunConfig, CliError> {
    let mut root = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
        }
        None => Value::Object(Default::default()),
    };
    if !root.is_object() {
        return Err(CliError::Config("configuration must be a JSON object".into()));
    }
    apply_overrides(&mut root, &args.overrides)?;
    let name = Value::String(experiment.name().into());
    match root.get("experiment") {
        Some(v) if v != &name => {
            return Err(CliError::Config(format!(
                "config declares experiment {v} but the subcommand is {}",
                experiment.name()
            )))
        }
        _ => root["experiment"] = name,
    }
    if let Some(out) = &args.out {
        root["output"] = Value::String(out.display().to_string());
    }
    if let Some(seed) = args.seed {
        root["seed"] = seed.into();
    }
    let env_workers = std::env::var(WORKERS_ENV).ok();
    if let Some(w) = args.workers {
        root["workers"] = w.into();
    } else if let Some(w) = env_workers {
        let w: usize = w
            .parse()
            .map_err(|_| CliError::Config(format!("{WORKERS_ENV}={w} is not a worker count")))?;
        root["workers"] = w.into();
    }
    let cfg: RunConfig = serde_json::from_value(root).map_err(|e| CliError::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

fn fail(dir: &Path, mut manifest: RunManifest, err: &CliError) -> i32 {
    manifest.status = RunStatus::Failed;
    manifest.error = Some(err.to_string());
    manifest.finished_unix_s = Some(unix_now());
    if let Err(e) = manifest.write(dir) {
        eprintln!("bhchain: could not write manifest: {e}");
    }
    eprintln!("bhchain: {err}");
    err.exit_code()
}

/// Runs a parsed command line and returns the process exit code.
pub fn execute(cli: &Cli) -> i32 {
    let (experiment, args) = cli.command.parts();
    let cfg = match resolve_config(experiment, args) {
        Ok(c) => c,
        Err(e) => {
            let dir = args.out.clone().unwrap_or_else(|| PathBuf::from("out"));
            return fail(&dir, RunManifest::start(None), &e);
        }
    };
    let mut manifest = RunManifest::start(serde_json::to_value(&cfg).ok());
    // a manifest marked "running" survives an interrupted run
    if let Err(e) = manifest.write(&cfg.output) {
        eprintln!("bhchain: {e}");
        return e.exit_code();
    }
    let mut out = match OutputDir::create(&cfg.output) {
        Ok(o) => o,
        Err(e) => return fail(&cfg.output, manifest, &e),
    };
    let result = commands::run(&cfg, &mut out);
    manifest.files = out.files.clone();
    match result {
        Ok(outcome) => {
            manifest.tasks = outcome.tasks;
            manifest.status = if outcome.partial { RunStatus::Partial } else { RunStatus::Completed };
            manifest.finished_unix_s = Some(unix_now());
            if let Err(e) = manifest.write(&cfg.output) {
                eprintln!("bhchain: {e}");
                return e.exit_code();
            }
            if outcome.partial {
                EXIT_PARTIAL
            } else {
                EXIT_OK
            }
        }
        Err(e) => fail(&cfg.output, manifest, &e),
    }
}
