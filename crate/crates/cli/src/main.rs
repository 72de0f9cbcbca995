//! `ivjump`: runs the pipeline stages against a working directory.

mod config;
mod plot;
mod stages;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use crate::config::PipelineConfig;
use crate::stages::Runner;

pub const SEED_ENV: &str = "IVJUMP_SEED";

#[derive(Debug, Parser)]
#[command(name = "ivjump", version, about = "Intraday option IV response to underlying return jumps")]
struct Cli {
    /// Configuration file (`key = value` lines, `#` comments).
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides the `output` key.
    #[arg(short, long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for the parallel stages.
    #[arg(short, long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, Subcommand)]
enum Command {
    /// Simulate a market with planted jumps and write underlying, option and rate files.
    Simulate,
    /// Run the jump test and label each morning.
    Detect,
    /// Fit minute-by-minute IV surfaces and dump the smiles.
    Surfaces,
    /// Smile principal components with Varimax rotation.
    Pca,
    /// Event-study regressions and average curves with bootstrap bands.
    Eventstudy,
    /// Alternative significance level, extended window and reference re-draws.
    Robustness,
    /// Render SVG charts from the curve and loading tables.
    Plot,
}

impl Command {
    fn stage(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Detect => "detect",
            Command::Surfaces => "surfaces",
            Command::Pca => "pca",
            Command::Eventstudy => "eventstudy",
            Command::Robustness => "robustness",
            Command::Plot => "plot",
        }
    }
}

fn resolve(cli: &Cli) -> Result<PipelineConfig> {
    let mut config = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(out) = &cli.out {
        config.output = out.clone();
    }
    if let Ok(seed) = std::env::var(SEED_ENV) {
        let seed = seed
            .trim()
            .parse()
            .with_context(|| format!("{SEED_ENV}={seed} is not an unsigned integer"))?;
        config.override_seeds(seed);
    }
    Ok(config)
}

fn run(cli: Cli) -> Result<()> {
    if let Some(jobs) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs.max(1))
            .build_global()
            .context("configuring worker threads")?;
    }
    let mut runner = Runner::new(resolve(&cli)?);
    let summary = runner.run(cli.command.stage())?;
    for note in &runner.notes {
        println!("{note}");
    }
    println!("{summary}");
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
