//! Command-line interface to the pipeline.
//!
//! Each subcommand runs one stage (or all of them) against the configured
//! output directory. Exit codes are stable per failure category: 2 for
//! config problems, 3 for missing stage inputs, 4 for artifact corruption,
//! 5 for numeric failures, 1 otherwise.

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use pairwise_rl::runner::{ExperimentConfig, Runner, SeedsConfig, Stage};
use pairwise_rl::Result;

#[derive(Parser)]
#[command(
    name = "pairwise-rl",
    about = "Pairwise reward modelling and pairwise PPO on a synthetic preference world",
    version
)]
struct Cli {
    /// Experiment config (TOML); omitted means the desk defaults.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Override every stage seed with one value.
    #[arg(long, global = true, value_name = "INT")]
    seed: Option<u64>,

    /// Override the configured output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Re-run the stage even if its recorded inputs and outputs still match.
    #[arg(long, global = true)]
    force: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Sample the comparison datasets and the training prompts.
    GenData,
    /// Train the pairwise reward model and evaluate it held-out.
    TrainRm,
    /// Distill the pairwise model into a pointwise scorer.
    Distill,
    /// Pick per-prompt anchors with the pointwise scorer and diagnose them.
    SelectAnchors,
    /// Run pairwise PPO against the anchors.
    TrainRl,
    /// Write the evaluation report (and the critic ablation if configured).
    Eval,
    /// Verify the per-update KL bound on a tiny enumerable policy.
    VerifyKlbound,
    /// Run every stage in order.
    RunAll,
}

impl Command {
    fn stage(self) -> Option<Stage> {
        match self {
            Command::GenData => Some(Stage::GenData),
            Command::TrainRm => Some(Stage::TrainRm),
            Command::Distill => Some(Stage::Distill),
            Command::SelectAnchors => Some(Stage::SelectAnchors),
            Command::TrainRl => Some(Stage::TrainRl),
            Command::Eval => Some(Stage::Eval),
            Command::VerifyKlbound => Some(Stage::VerifyKlbound),
            Command::RunAll => None,
        }
    }
}

fn resolve_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::desk(),
    };
    if let Some(seed) = cli.seed {
        cfg.seeds = SeedsConfig::uniform(seed);
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.display().to_string();
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = resolve_config(cli)?;
    let runner = Runner::new(cfg, cli.force)?;
    match cli.command.stage() {
        Some(stage) => {
            runner.run(stage)?;
        }
        None => {
            runner.run_all()?;
        }
    }
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(&cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
