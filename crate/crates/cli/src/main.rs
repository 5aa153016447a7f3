//! `d2s`: simulate, denoise and evaluate dynamic image sequences.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use d2s::phantom::MotionKind;
use d2s::pipeline::Ablation;

#[derive(Parser)]
#[command(
    name = "d2s",
    version,
    about = "Self-supervised denoising of dynamic image sequences"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic moving phantom with its ROI and true deformation fields.
    Phantom(PhantomArgs),
    /// Add seeded noise to a clean container.
    Simulate(SimulateArgs),
    /// Train on one noisy sequence and write the denoised target frame.
    Denoise(DenoiseArgs),
    /// Compare an estimate against the clean target of a container.
    Evaluate(EvaluateArgs),
    /// Convert a raw f32 image to an 8-bit grayscale PNG.
    ExportPng(ExportArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Motion {
    Contraction,
    Translation,
    Mixed,
}

impl From<Motion> for MotionKind {
    fn from(m: Motion) -> Self {
        match m {
            Motion::Contraction => MotionKind::Contraction,
            Motion::Translation => MotionKind::Translation,
            Motion::Mixed => MotionKind::Mixed,
        }
    }
}

#[derive(Args)]
struct PhantomArgs {
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 5)]
    frames: usize,
    /// Peak displacement in pixels.
    #[arg(long, default_value_t = 3.0)]
    amplitude: f64,
    #[arg(long, value_enum, default_value = "contraction")]
    motion: Motion,
    /// Blood-pool intensity scale at the ends of the sequence.
    #[arg(long, default_value_t = 1.0)]
    drift: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum NoiseKind {
    Gaussian,
    Poisson,
    Rician,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum)]
    noise: NoiseKind,
    /// Standard deviation for gaussian and rician noise.
    #[arg(long)]
    sigma: Option<f64>,
    /// Photon level P for poisson noise.
    #[arg(long)]
    plevel: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct DenoiseArgs {
    /// Noisy sequence container.
    #[arg(long)]
    input: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// JSON file with training settings; flags given here take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = parse_ablation)]
    ablation: Option<Ablation>,
    #[arg(long)]
    n_aux: Option<usize>,
    #[arg(long)]
    n_train: Option<u64>,
    #[arg(long)]
    n_test: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    dropout_rate: Option<f64>,
    #[arg(long)]
    lambda_smooth: Option<f64>,
    #[arg(long)]
    lambda_s: Option<f64>,
    #[arg(long)]
    lambda_r: Option<f64>,
    /// Enable or disable random 90-degree rotations during training.
    #[arg(long)]
    augment_rotations: Option<bool>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    denoiser_width: Option<usize>,
    #[arg(long)]
    registration_width: Option<usize>,
}

fn parse_ablation(s: &str) -> Result<Ablation, String> {
    s.parse().map_err(|e: d2s::Error| e.to_string())
}

#[derive(Args)]
struct EvaluateArgs {
    /// Raw f32 estimate of the target frame.
    #[arg(long)]
    estimate: PathBuf,
    /// Container with clean frames.
    #[arg(long)]
    input: PathBuf,
    /// Also report metrics inside the container's ROI.
    #[arg(long)]
    roi: bool,
    #[arg(long, default_value = "estimate")]
    method: String,
    /// Where to write the JSON report (always printed to stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExportArgs {
    /// Raw f32 image.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    /// Take the image size from this container's manifest.
    #[arg(long)]
    like: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("D2S_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Phantom(a) => commands::phantom(a),
        Command::Simulate(a) => commands::simulate(a),
        Command::Denoise(a) => commands::denoise(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::ExportPng(a) => commands::export_png(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
