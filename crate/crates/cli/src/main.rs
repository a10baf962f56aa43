//! `lwanet`: train, run, benchmark and profile the segmentation network.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "lwanet", version, about = "Lightweight attention segmentation network")]
struct Cli {
    /// Worker threads for the numeric kernels (results are deterministic for a fixed count).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model; writes model.lwaw, best.lwaw, checkpoint.lwaw and history.jsonl.
    Train(TrainArgs),
    /// Predict masks and colour overlays for PNG images.
    Infer(InferArgs),
    /// Time eval-mode forward passes.
    Bench(BenchArgs),
    /// Print the per-layer cost model.
    Analyze(AnalyzeArgs),
    /// Finite-difference check of every differentiable op and block.
    GradCheck(GradCheckArgs),
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// JSON run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Train on this many procedurally generated samples.
    #[arg(long)]
    pub synthetic: Option<usize>,
    /// Dataset root (overrides the config file).
    #[arg(long)]
    pub data_root: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<u64>,
    #[arg(long)]
    pub max_steps: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub classes: Option<usize>,
    /// Input size as WIDTHxHEIGHT.
    #[arg(long)]
    pub size: Option<String>,
    /// Plain addition instead of attention fusion in the decoder.
    #[arg(long)]
    pub no_afb: bool,
    /// Disable augmentation.
    #[arg(long)]
    pub no_augment: bool,
    /// Initialise the encoder from this weight file.
    #[arg(long)]
    pub pretrained: Option<PathBuf>,
    /// Continue from a checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long, default_value = "lwanet-run")]
    pub out: PathBuf,
    /// Print per-epoch progress to stderr.
    #[arg(long, short)]
    pub verbose: bool,
    #[arg(long)]
    pub json: bool,
}

#[derive(Args, Debug)]
pub struct InferArgs {
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// classes.json with display colours.
    #[arg(long)]
    pub classes: Option<PathBuf>,
    /// Resize inputs whose sides are not multiples of 32 instead of failing.
    #[arg(long)]
    pub resize: bool,
    #[arg(long)]
    pub json: bool,
    /// PNG files or directories of PNG files.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    /// Weight file; random weights when omitted.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Input size as WIDTHxHEIGHT; repeat for several sizes.
    #[arg(long = "size", default_value = "960x544")]
    pub sizes: Vec<String>,
    #[arg(long, default_value_t = 20)]
    pub iters: usize,
    #[arg(long, default_value_t = 2)]
    pub warmup: usize,
    #[arg(long)]
    pub json: bool,
}

#[derive(Args, Debug)]
pub struct AnalyzeArgs {
    #[arg(long, conflicts_with = "weights")]
    pub config: Option<PathBuf>,
    /// Read the network config echoed in a weight file.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// Input size as WIDTHxHEIGHT (default: the config's input size).
    #[arg(long)]
    pub size: Option<String>,
    #[arg(long)]
    pub no_afb: bool,
    /// Also list every layer.
    #[arg(long)]
    pub per_layer: bool,
    /// 1 reports MACs as FLOPs; 2 counts multiplies and adds separately.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..=2))]
    pub flops_per_mac: u64,
    #[arg(long)]
    pub json: bool,
}

#[derive(Args, Debug)]
pub struct GradCheckArgs {
    #[arg(long)]
    pub seed: Option<u64>,
    /// Random draws per op.
    #[arg(long, default_value_t = 20)]
    pub cases: usize,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl From<lwanet::Error> for CliError {
    fn from(e: lwanet::Error) -> Self {
        match e {
            lwanet::Error::Config(_) => CliError::Usage(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.workers {
        if n == 0 {
            eprintln!("error: --workers must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot configure {n} workers: {e}");
            return ExitCode::from(1);
        }
    }
    let result = match cli.command {
        Command::Train(a) => commands::train(a),
        Command::Infer(a) => commands::infer(a),
        Command::Bench(a) => commands::bench(a),
        Command::Analyze(a) => commands::analyze(a),
        Command::GradCheck(a) => commands::grad_check(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
