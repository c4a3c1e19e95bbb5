//! `pderefiner`: generate Kuramoto-Sivashinsky data, train one-step
//! surrogates, roll them out and evaluate the rollouts.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use crate::config::{
    EvaluateConfig, GenerateArgs, RolloutArgs, RunConfig, SpectrumConfig, TrainArgs, UncertaintyArgs, SEED_ENV,
};
use crate::output::Outputs;

#[derive(Debug, Parser)]
#[command(name = "pderefiner", version, about)]
struct Cli {
    /// Rerun the command recorded in a `*.config.json` sidecar.
    #[arg(long, global = true, value_name = "SIDECAR")]
    config: Option<PathBuf>,
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Print the resolved configuration and exit without running.
    #[arg(long, global = true)]
    dry_run: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate a trajectory dataset.
    Generate(GenerateArgs),
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Roll a checkpoint out from the first frames of each trajectory.
    Rollout(RolloutArgs),
    /// Correlation and MSE of predicted against reference trajectories.
    Evaluate(EvaluateConfig),
    /// Amplitude spectra of a dataset, or of prediction errors.
    Spectrum(SpectrumConfig),
    /// Sample-based divergence time against actual accurate time.
    Uncertainty(UncertaintyArgs),
}

impl Command {
    fn resolve(self) -> RunConfig {
        match self {
            Command::Generate(a) => RunConfig::Generate(a.resolve()),
            Command::Train(a) => RunConfig::Train(a.resolve()),
            Command::Rollout(a) => RunConfig::Rollout(a.resolve()),
            Command::Evaluate(c) => RunConfig::Evaluate(c),
            Command::Spectrum(c) => RunConfig::Spectrum(c),
            Command::Uncertainty(a) => RunConfig::Uncertainty(a.resolve()),
        }
    }
}

fn seed_override() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => {
            Ok(Some(v.trim().parse().with_context(|| {
                format!("{SEED_ENV}={v:?} is not an unsigned integer")
            })?))
        }
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(e) => bail!("{SEED_ENV}: {e}"),
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    let config = match (cli.config, cli.command) {
        (Some(path), None) => {
            let bytes = std::fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_slice::<RunConfig>(&bytes).with_context(|| format!("parsing {}", path.display()))?
        }
        (None, Some(command)) => command.resolve(),
        (Some(_), Some(_)) => bail!("--config replaces the subcommand; pass one or the other"),
        (None, None) => bail!("no command given (see --help)"),
    };
    let config = config.with_seed_override(seed_override()?);
    if cli.dry_run {
        println!("{}", serde_json::to_string_pretty(&config)?);
        return Ok(());
    }
    let mut outputs = Outputs::default();
    match &config {
        RunConfig::Generate(c) => commands::generate(c, &mut outputs)?,
        RunConfig::Train(c) => commands::train(c, &mut outputs)?,
        RunConfig::Rollout(c) => commands::rollout(c, &mut outputs)?,
        RunConfig::Evaluate(c) => commands::evaluate(c, &mut outputs)?,
        RunConfig::Spectrum(c) => commands::spectrum(c, &mut outputs)?,
        RunConfig::Uncertainty(c) => commands::uncertainty(c, &mut outputs)?,
    }
    outputs.add_json(config.sidecar_path(), &config)?;
    outputs.commit()
}

/// Category printed with an error message.
fn error_kind(err: &anyhow::Error) -> &'static str {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<pde_refiner::Error>() {
            return e.kind();
        }
        if cause.is::<std::io::Error>() || cause.is::<tempfile::PersistError>() {
            return "io";
        }
    }
    "config"
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => e.exit(),
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error[{}]: {err:#}", error_kind(&err));
            ExitCode::from(1)
        }
    }
}
