//! `evtgan`: synthetic fading streams, tail-aware estimator training, and
//! evaluation against classical baselines, as a five-command pipeline.

use std::path::PathBuf;
use std::process;

use clap::{ArgAction, Args, Parser, Subcommand};

mod augment;
mod config;
mod errors;
mod estimate;
mod evaluate;
mod report;
mod synth;
mod train;

use errors::CliResult;

#[derive(Parser)]
#[command(name = "evtgan", version, about = "Tail-aware channel estimation toolkit")]
struct Cli {
    /// Increase log detail (repeat for debug, trace). Logs go to stderr.
    #[arg(short, long, global = true, action = ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic power stream with known tail behaviour.
    Synth(SynthArgs),
    /// Train per-regime generators and emit an augmented dataset.
    Augment(AugmentArgs),
    /// Fit regimes, then train the threshold and parameter networks.
    Train(TrainArgs),
    /// Run a trained checkpoint over a stream, window by window.
    Estimate(EstimateArgs),
    /// Score models against a labelled stream and write comparison tables.
    Evaluate(EvaluateArgs),
}

#[derive(Args)]
pub struct SynthArgs {
    /// JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Root seed, overriding the config file.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
pub struct AugmentArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Input stream CSV.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Training stream CSV.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Window length in samples (default 100).
    #[arg(long)]
    window: Option<usize>,
    /// Window stride in samples.
    #[arg(long)]
    stride: Option<usize>,
    /// Ablation variant; `constant-threshold` is the only one.
    #[arg(long)]
    ablation: Option<String>,
}

#[derive(Args)]
pub struct EstimateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Stream CSV to estimate over.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Trained estimator checkpoint.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Window length cross-check; must match the checkpoint.
    #[arg(long)]
    window: Option<usize>,
    /// Stride between windows (default 1).
    #[arg(long)]
    stride: Option<usize>,
    /// Outage threshold in dB; adds a tail-probability column.
    #[arg(long)]
    xth: Option<f64>,
}

#[derive(Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Evaluation stream CSV.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Adversarially trained checkpoint (the `evt_gan` model slot).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    stride: Option<usize>,
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
}

fn run(command: Command) -> CliResult<()> {
    match command {
        Command::Synth(args) => synth::run(args),
        Command::Augment(args) => augment::run(args),
        Command::Train(args) => train::run(args),
        Command::Estimate(args) => estimate::run(args),
        Command::Evaluate(args) => evaluate::run(args),
    }
}

fn main() {
    let cli = Cli::parse();
    init_logging(cli.verbose);
    match run(cli.command) {
        Ok(()) => {}
        Err(err) => {
            eprintln!("error: {err}");
            process::exit(err.code);
        }
    }
}
