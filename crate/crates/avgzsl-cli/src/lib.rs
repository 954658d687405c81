//! Command-line front end for the audio-visual GZSL toolkit: dataset
//! synthesis, per-stage training with checkpoints and loss traces, gated
//! evaluation, the ablation tables, and SVG plots of the emitted plot data.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub mod commands;
pub mod config;
pub mod error;
pub mod svg;
pub mod tables;

pub use error::{CliError, CliResult};

#[derive(Parser)]
#[command(
    name = "avgzsl",
    version,
    about = "Audio-visual generalized zero-shot learning: train, gate, evaluate"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Synthesize the benchmark dataset and write it as a directory
    GenData {
        #[command(flatten)]
        args: CommonArgs,
    },
    /// Train one stage and write its checkpoint plus a loss-trace CSV
    Train {
        /// Stage to train; the detector needs a generator checkpoint first
        #[arg(value_enum)]
        stage: Stage,
        #[command(flatten)]
        args: CommonArgs,
    },
    /// Route the test splits through the configured gate and write the report
    Evaluate {
        #[command(flatten)]
        args: CommonArgs,
    },
    /// Rerun one ablation and write its table (and plot data where relevant)
    Ablate {
        /// Which comparison to run
        #[arg(value_enum)]
        which: Ablation,
        #[command(flatten)]
        args: CommonArgs,
    },
    /// Render a plot-data CSV (ROC or threshold sweep) to an SVG image
    Plot {
        /// CSV produced by `evaluate` or `ablate`
        input: PathBuf,
        /// Output image path
        output: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Stage {
    Generator,
    Ood,
    Seen,
    Unseen,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Ablation {
    Bias,
    Classifiers,
    NegLoss,
    ThresholdSweep,
}

/// Flags shared by every config-driven subcommand.
#[derive(Args)]
pub struct CommonArgs {
    /// Experiment config JSON; fields it omits come from the preset
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Replace the config's seed list with this single seed
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (overrides the config's out_dir)
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Starting point for the config: synthetic, vggsound, ucf, activitynet
    #[arg(long, default_value = "synthetic")]
    pub preset: String,
}

impl CommonArgs {
    fn resolve(&self) -> CliResult<config::ExperimentConfig> {
        config::resolve(&self.preset, self.config.as_deref(), self.seed, self.out.as_deref())
    }
}

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::GenData { args } => commands::gen_data(&args.resolve()?),
        Command::Train { stage, args } => commands::train(stage, &args.resolve()?),
        Command::Evaluate { args } => commands::evaluate(&args.resolve()?),
        Command::Ablate { which, args } => commands::ablate(which, &args.resolve()?),
        Command::Plot { input, output } => svg::render(&input, &output),
    }
}
