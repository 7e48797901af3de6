//! `segdiff`: phantom generation, diffusion and segmenter training, mask-guided
//! sampling and evaluation from the command line.

mod commands;
mod config;
mod sheet;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use segdiff_core::Error;

#[derive(Parser)]
#[command(
    name = "segdiff",
    version,
    about = "Segmentation-guided diffusion on procedural phantoms"
)]
struct Cli {
    /// Worker threads for data generation, sampling and evaluation.
    #[arg(long, global = true, env = "SEGDIFF_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a phantom dataset with train/heldout/validation/test splits.
    GenData(GenDataArgs),
    /// Train a diffusion model or an auxiliary segmenter.
    Train(TrainArgs),
    /// Generate images from masks with a trained diffusion model.
    Sample(SampleArgs),
    /// Run an evaluation protocol.
    Evaluate(EvaluateArgs),
}

#[derive(Args)]
pub struct GenDataArgs {
    /// `key = value` file with phantom settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Number of phantoms.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Split ratios as `train,heldout,validation,test`.
    #[arg(long)]
    pub ratios: Option<String>,
}

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset directory written by `gen-data`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// guided, guided-ablated, unconditional or segmenter.
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub warmup: Option<u64>,
    #[arg(long)]
    pub base_channels: Option<usize>,
    /// Diffusion timesteps T.
    #[arg(long)]
    pub diffusion_steps: Option<usize>,
}

#[derive(Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// Directory of `msk_*.pgm` files (a dataset directory uses its test
    /// split) or `empty` for all-background masks.
    #[arg(long)]
    pub masks: Option<String>,
    /// Comma-separated classes to remove from every mask.
    #[arg(long)]
    pub pattern: Option<String>,
    /// ddim or ddpm.
    #[arg(long)]
    pub sampler: Option<String>,
    /// Reverse steps (DDIM only; DDPM always uses all T).
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Diffusion checkpoint, or `oracle` (real images) or `noise`.
    #[arg(long)]
    pub gen_ckpt: Option<String>,
    #[arg(long)]
    pub seg_ckpt: Option<PathBuf>,
    /// Unconditional diffusion checkpoint (empty-mask protocol).
    #[arg(long)]
    pub uncond_ckpt: Option<String>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// faithfulness, quality, fid or empty-mask.
    #[arg(long)]
    pub protocol: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
    /// Masks or samples to use (defaults to the whole test split).
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub sampler: Option<String>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Segmenter epochs for the quality protocol.
    #[arg(long)]
    pub seg_epochs: Option<usize>,
}

/// Scripting contract: 2 configuration, 3 I/O, 4 numerical.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(Error::Config(_) | Error::Contract(_) | Error::Shape { .. }) => 2,
        Some(Error::Io { .. } | Error::Format { .. }) => 3,
        Some(Error::Numerical(_)) => 4,
        None => 1,
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("cannot start {n} worker threads: {e}")))?;
    }
    match cli.command {
        Command::GenData(a) => commands::gen_data::run(&a),
        Command::Train(a) => commands::train::run(&a),
        Command::Sample(a) => commands::sample::run(&a),
        Command::Evaluate(a) => commands::evaluate::run(&a),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
