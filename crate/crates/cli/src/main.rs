mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use gcdet::ModelSize;

/// Anchor-free detector with Global Context blocks: data preparation,
/// training, evaluation and model profiling.
#[derive(Parser, Debug)]
#[command(name = "gcdet", version, propagate_version = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Options accepted by every subcommand.
#[derive(Args, Debug, Clone)]
pub struct Common {
    /// TOML run configuration; flags given on the command line take precedence.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Seed for every random choice the command makes.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug, Clone)]
pub struct ModelArgs {
    /// Model scale.
    #[arg(long, value_parser = parse_size)]
    pub size: Option<ModelSize>,
    /// Insert Global Context blocks in the neck (`true` or `false`).
    #[arg(long, value_name = "BOOL")]
    pub gc: Option<bool>,
    #[arg(long)]
    pub num_classes: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitName {
    Train,
    Val,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Text,
    Json,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Shuffle the dataset ids and write train.txt, val.txt and test.txt.
    Split {
        #[command(flatten)]
        common: Common,
        /// Dataset root holding `images/` and `labels/`.
        #[arg(long)]
        data: PathBuf,
        /// Where the manifests go (default: the dataset root).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Train, validation and test fractions.
        #[arg(long, num_args = 3, value_names = ["TRAIN", "VAL", "TEST"])]
        ratios: Option<Vec<f64>>,
    },
    /// Write a dataset whose training split is doubled with contrast and
    /// brightness copies; validation and test images are copied unchanged.
    Augment {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Directory with the split manifests (default: the dataset root).
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        num_classes: Option<usize>,
    },
    /// Generate a synthetic dataset of shapes on a noise background.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        num_images: Option<usize>,
        #[arg(long)]
        num_classes: Option<usize>,
        /// Relative class frequencies, one per class.
        #[arg(long, num_args = 1.., value_name = "W")]
        class_weights: Option<Vec<f64>>,
        #[arg(long)]
        image_size: Option<usize>,
    },
    /// Train a detector on the train split, selecting the best epoch on val.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Output directory for checkpoints, history and the resolved config.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr0: Option<f64>,
        #[arg(long)]
        image_size: Option<usize>,
    },
    /// Evaluate a checkpoint on one split and write the report as JSON.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = SplitName::Val)]
        split: SplitName,
        /// Report path (default: print to stdout).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        conf: Option<f64>,
        #[arg(long)]
        iou: Option<f64>,
        /// Network input side (default: the training size stored in the checkpoint).
        #[arg(long)]
        image_size: Option<usize>,
        /// Also time inference with this many runs.
        #[arg(long, default_value_t = 0)]
        time_runs: usize,
    },
    /// Run a checkpoint over a directory of images and write one detection per line.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory holding an `images/` folder.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        conf: Option<f64>,
        #[arg(long)]
        iou: Option<f64>,
        #[arg(long)]
        image_size: Option<usize>,
    },
    /// Time single-image inference of a checkpoint or a freshly built model.
    Bench {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArgs,
        /// Benchmark these weights instead of a fresh model.
        #[arg(long, conflicts_with_all = ["size", "gc", "num_classes"])]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        image_size: Option<usize>,
        /// Number of random input images per pass.
        #[arg(long, default_value_t = 4)]
        images: usize,
        #[arg(long)]
        warmup: Option<usize>,
        #[arg(long)]
        runs: Option<usize>,
        /// Write timing statistics as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Parameter and FLOP table for each size, with and without GC blocks.
    Report {
        #[command(flatten)]
        common: Common,
        #[arg(long, num_args = 1.., value_parser = parse_size, default_values = ["S", "M", "L"])]
        sizes: Vec<ModelSize>,
        #[arg(long, default_value_t = 1024)]
        input_size: usize,
        #[arg(long)]
        num_classes: Option<usize>,
        /// Output format on stdout.
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
        /// Also write the table as JSON.
        #[arg(long, value_name = "FILE")]
        json: Option<PathBuf>,
    },
    /// Export precision-recall curves (CSV and SVG) from an evaluation report.
    PlotPr {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Display names indexed by class id (default: the nine dataset classes).
        #[arg(long, num_args = 1..)]
        class_names: Option<Vec<String>>,
    },
}

fn parse_size(s: &str) -> Result<ModelSize, String> {
    s.parse().map_err(|e: gcdet::Error| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let chain: Vec<String> = e.chain().map(|c| c.to_string()).collect();
            eprintln!("error: {}", chain.join(": "));
            ExitCode::FAILURE
        }
    }
}
