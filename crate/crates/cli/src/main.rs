//! `mia-lens` command-line driver.
//!
//! Every subcommand brings one pipeline stage (and anything it depends on)
//! up to date in the run directory derived from the config hash.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::error;

use mia_lens::config::RunConfig;
use mia_lens::pipeline::{Pipeline, PipelineOptions, Stage};
use mia_lens::Error;

#[derive(Parser, Debug)]
#[command(name = "mia-lens", version, about = "White-box membership-inference audits")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root directory for run outputs; overrides `out_root`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Root seed; overrides `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Reuse grid cells finished by an interrupted run.
    #[arg(long, global = true)]
    resume: bool,
    /// Stop the grid after this many newly trained cells.
    #[arg(long, global = true, hide = true)]
    halt_after_cells: Option<usize>,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Partition the dataset into target/shadow train/test splits.
    Split,
    /// Train the target and shadow classifiers.
    Train,
    /// Capture hidden-layer activations.
    Extract,
    /// Rank neurons with every selection method.
    Rank,
    /// Build attack feature sets for every grid cell.
    Features,
    /// Train and evaluate the method x threshold x layer attack grid.
    Grid,
    /// Rank grid models by Shapley value and fit the stacked ensemble.
    Ensemble,
    /// Fit ensembles over the top 1..k models.
    EnsembleSweep,
    /// Attribute target and attack decisions to input pixels.
    Explain,
    /// Write report.json and figures.
    Report,
    /// Every stage in order.
    Run,
}

impl Command {
    fn stage(self) -> Stage {
        match self {
            Command::Split => Stage::Split,
            Command::Train => Stage::Train,
            Command::Extract => Stage::Extract,
            Command::Rank => Stage::Rank,
            Command::Features => Stage::Features,
            Command::Grid => Stage::Grid,
            Command::Ensemble => Stage::Ensemble,
            Command::EnsembleSweep => Stage::Sweep,
            Command::Explain => Stage::Explain,
            Command::Report | Command::Run => Stage::Report,
        }
    }
}

const EXIT_VALIDATION: u8 = 2;
const EXIT_STAGE: u8 = 3;

fn load_config(cli: &Cli) -> Result<RunConfig, Error> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::InvalidConfiguration("--config is required".into()))?;
    let mut cfg = RunConfig::load(path)?;
    if let Some(out) = &cli.out {
        cfg.out_root = out.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let options = PipelineOptions {
        resume: cli.resume,
        halt_after_cells: cli.halt_after_cells,
    };
    let pipeline = load_config(&cli).and_then(|cfg| Pipeline::new(cfg, options));
    let mut pipeline = match pipeline {
        Ok(p) => p,
        Err(e) => {
            error!("{e}");
            return ExitCode::from(EXIT_VALIDATION);
        }
    };
    let stage = cli.command.stage();
    match pipeline.ensure(stage) {
        Ok(()) => {
            println!("{}", pipeline.run.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            error!("stage {stage} failed: {e}");
            let code = match e {
                Error::InvalidConfiguration(_) => EXIT_VALIDATION,
                _ => EXIT_STAGE,
            };
            ExitCode::from(code)
        }
    }
}
