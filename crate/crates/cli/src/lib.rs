//! Experiment harness for the predictive-attention simulator.

pub mod commands;
pub mod config;
pub mod dataset;
pub mod output;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand, ValueEnum};

pub use config::{ConfigSources, ExperimentConfig};

#[derive(Debug, Parser)]
#[command(name = "predattn", version, about = "Predictive attention for event cameras")]
pub struct Cli {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// Experiment configuration (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configuration's seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides one configuration key; repeatable.
    #[arg(long = "set", global = true, value_name = "SECTION.KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Target {
    Predictor,
    Evaluator,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic dataset (AER files and manifest).
    GenData,
    /// Train the predictor or the evaluator.
    Train {
        #[arg(long, value_enum)]
        target: Target,
    },
    /// Score frame pairs (recordings, shifted-ball or noise scenario).
    Metrics,
    /// Run the closed loop on held-out sequences and write traces.
    RunAttention,
    /// Compare predictive, random and periodic gating at matched rates.
    Compare,
    /// Write event frames as PGM images.
    DumpFrames {
        /// Dataset sequence to dump.
        #[arg(long, default_value_t = 0, conflicts_with = "aer")]
        sequence: usize,
        /// AER recording to dump instead of a dataset sequence.
        #[arg(long)]
        aer: Option<PathBuf>,
    },
}

impl CommonArgs {
    pub fn sources(&self) -> ConfigSources {
        ConfigSources {
            config: self.config.clone(),
            seed: self.seed,
            overrides: self.set.clone(),
            default_output: None,
        }
    }
}

/// Executes one command against an already loaded configuration.
pub fn execute(cfg: &ExperimentConfig, command: &Command) -> Result<Vec<PathBuf>> {
    match command {
        Command::GenData => commands::gen_data(cfg),
        Command::Train { target: Target::Predictor } => commands::train_predictor(cfg),
        Command::Train { target: Target::Evaluator } => commands::train_evaluator(cfg),
        Command::Metrics => commands::metrics(cfg),
        Command::RunAttention => commands::run_attention(cfg),
        Command::Compare => commands::compare(cfg),
        Command::DumpFrames { sequence, aer } => {
            let source = match aer {
                Some(p) => commands::FrameSource::Recording(p.clone()),
                None => commands::FrameSource::Sequence(*sequence),
            };
            commands::dump_frames(cfg, &source)
        }
    }
}

pub fn run(cli: &Cli) -> Result<Vec<PathBuf>> {
    let cfg = ExperimentConfig::load(&cli.common.sources())?;
    execute(&cfg, &cli.command)
}
