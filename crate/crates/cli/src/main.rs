//! `shadowad`: dataset synthesis, training, detection, attenuation,
//! evaluation and boundary-error analysis.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use shadowad::synthdata::Texture;
use shadowad::Error;

/// Worker-thread cap for the data-parallel parts (dataset generation, evaluation).
const THREADS_ENV: &str = "SHADOWAD_THREADS";

#[derive(Parser)]
#[command(name = "shadowad", version, about = "Adversarial shadow attenuation and detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic shadow dataset.
    Synth(SynthArgs),
    /// Train the attenuator and detector.
    Train(TrainArgs),
    /// Predict a shadow mask for one image.
    Detect(DetectArgs),
    /// Attenuate the shadow of one image.
    Attenuate(AttenuateArgs),
    /// Evaluate a detector on a dataset directory.
    Eval(EvalArgs),
    /// Boundary-distance error curves of predicted masks.
    Analyze(AnalyzeArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    count: u32,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Lowest shadowing factor in the umbra.
    #[arg(long, default_value_t = 0.0)]
    k_lo: f64,
    /// Highest shadowing factor in the umbra; must be below 1.
    #[arg(long, default_value_t = 0.6)]
    k_hi: f64,
    /// Gaussian penumbra width in pixels.
    #[arg(long, default_value_t = 1.0)]
    penumbra: f64,
    #[arg(long, default_value = "smooth-noise")]
    texture: Texture,
    #[arg(long, default_value_t = 0.15)]
    reflectance_floor: f64,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory; overrides `data` in the config.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Snapshot directory (`checkpoints/iter_NNNNNN`) to continue from.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct DetectArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    /// Also write the probability map as 8-bit grayscale.
    #[arg(long)]
    prob: Option<PathBuf>,
    /// Square size the image is resized to before the network.
    #[arg(long, default_value_t = 64)]
    input_size: usize,
}

#[derive(Args)]
struct AttenuateArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    mask: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 64)]
    input_size: usize,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    report: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    #[arg(long, default_value_t = 64)]
    input_size: usize,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    pred_dir: PathBuf,
    #[arg(long)]
    gt_dir: PathBuf,
    #[arg(long)]
    cdf: PathBuf,
    #[arg(long, default_value_t = 50)]
    max_distance: usize,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidArgument(_) | Error::Config(_) => 2,
        Error::NonFinite(_) | Error::NumericalAbort { .. } => 4,
        Error::Fingerprint { .. } | Error::Model(_) | Error::Checkpoint(_) => 5,
        Error::BackwardWithoutForward => 1,
        _ => 3,
    }
}

fn init_threads() -> Result<(), String> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("{THREADS_ENV} must be a positive integer, got {v:?}"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

fn run(cli: Cli) -> shadowad::Result<()> {
    match cli.command {
        Command::Synth(a) => commands::synth(&a),
        Command::Train(a) => commands::train(&a),
        Command::Detect(a) => commands::detect(&a),
        Command::Attenuate(a) => commands::attenuate(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Analyze(a) => commands::analyze(&a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(m) = init_threads() {
        eprintln!("error: {m}");
        return ExitCode::from(2);
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
