//! `fsat`: fuse, train, evaluate and benchmark infrared/visible fusion models.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_DATA: u8 = 3;
pub const EXIT_VERIFY: u8 = 4;

#[derive(Parser, Debug)]
#[command(
    name = "fsat",
    version,
    about = "Infrared/visible image fusion with a frequency-spatial attention transformer",
    after_help = "Every subcommand also accepts `--config <file>` with key=value lines \
                  mirroring its flags; flags given on the command line win."
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Fuse one registered pair.
    Fuse(FuseArgs),
    /// Train a model on a directory with ir/ and vi/ subdirectories.
    Train(TrainArgs),
    /// Fuse every pair of a dataset and write quality metrics as CSV.
    Eval(EvalArgs),
    /// Time fusion of every pair of a dataset.
    Bench(BenchArgs),
    /// Check network gradients against finite differences in f64.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
pub struct FuseArgs {
    /// Infrared image (PGM).
    #[arg(long)]
    pub ir: PathBuf,
    /// Visible image (PGM, or PPM with --rgb; a PPM without --rgb contributes its luma).
    #[arg(long)]
    pub vi: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    /// Output image: PGM, or PPM with --rgb.
    #[arg(long)]
    pub out: PathBuf,
    /// Fuse the luma of a color visible image and keep its chroma.
    #[arg(long)]
    pub rgb: bool,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Where to write the trained model.
    #[arg(long)]
    pub out: PathBuf,
    /// Start from the small-patch, small-batch settings for desk-sized corpora.
    #[arg(long)]
    pub desk: bool,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Floor of the cosine schedule.
    #[arg(long)]
    pub lr_min: Option<f64>,
    /// Side of the square every pair is resized to.
    #[arg(long)]
    pub patch: Option<usize>,
    /// Stop after this many optimizer steps.
    #[arg(long)]
    pub max_steps: Option<usize>,
    /// Seeds both initialization and shuffling.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Block structure: full, no_fsam, no_itm or reverse.
    #[arg(long, default_value = "full")]
    pub ablation: String,
    /// Number of FSAT blocks.
    #[arg(long, default_value_t = 2)]
    pub n_fsat: usize,
    /// Per-step loss trace; defaults to `<out>.trace.csv`.
    #[arg(long)]
    pub trace: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub csv: PathBuf,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value_t = 3)]
    pub repeats: usize,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Coordinates checked per parameter tensor (small tensors are checked fully).
    #[arg(long, default_value_t = 32)]
    pub samples: usize,
    #[arg(long, default_value_t = 1e-5)]
    pub tolerance: f64,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args = match config::expand_config_args(std::env::args_os().collect()) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(EXIT_USAGE);
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("error: {:#}", failure.error);
            ExitCode::from(failure.code)
        }
    }
}
