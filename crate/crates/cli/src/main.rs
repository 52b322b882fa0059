mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mirgan_core::{AblationMode, Error, ModalityMode};

#[derive(Parser, Debug)]
#[command(name = "mirgan", version, about = "Modality-invariant representation learning at desk scale")]
pub struct Cli {
    /// JSON run configuration; flags override its values
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// Seed for the corpus (gen-data), training (train) or evaluation noise
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,

    /// Output directory
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,

    /// Write into a non-empty output directory
    #[arg(long, global = true)]
    pub force: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic paired audio-visual corpus
    GenData {
        #[arg(long)]
        utterances: Option<usize>,
    },
    /// Train with the two-phase adversarial loop
    Train(TrainArgs),
    /// Evaluate a checkpoint, clean and at each SNR level
    Eval(EvalArgs),
    /// Finite-difference gradient checks at 64-bit
    Gradcheck {
        /// ops, modules or full; repeat for several (default: all)
        #[arg(long)]
        scope: Vec<String>,
        /// Corrupt this op's backward rule (test fixture)
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// Alignment, discriminator and embedding artifacts for a checkpoint
    Diagnose(DiagnoseArgs),
    /// Train every ablation mode over several seeds and summarise
    Ablate(AblateArgs),
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long, value_name = "DIR")]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub ablation: Option<AblationMode>,
    #[arg(long)]
    pub modality: Option<ModalityMode>,
    /// Continue from a checkpoint (its stored configuration is used)
    #[arg(long, value_name = "PATH")]
    pub resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long, value_name = "PATH")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    pub corpus: Option<PathBuf>,
    #[arg(long, default_value = "AV")]
    pub modality: ModalityMode,
    /// Comma-separated SNR levels in dB; "" evaluates clean only
    #[arg(long, allow_hyphen_values = true)]
    pub snr: Option<String>,
    #[arg(long, default_value = "val")]
    pub split: commands::SplitChoice,
}

#[derive(Args, Debug)]
pub struct DiagnoseArgs {
    #[arg(long, value_name = "PATH")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    pub corpus: Option<PathBuf>,
    #[arg(long, default_value = "AV")]
    pub modality: ModalityMode,
    #[arg(long, default_value = "val")]
    pub split: commands::SplitChoice,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[arg(long, value_name = "DIR")]
    pub corpus: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
    pub seeds: Vec<u64>,
    /// Subset of modes (default: all eight)
    #[arg(long, value_delimiter = ',')]
    pub modes: Vec<AblationMode>,
    #[arg(long)]
    pub steps: Option<u64>,
}

/// Process exit status for a library error.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Usage(_) | Error::Config(_) => 2,
        Error::Divergence { .. } | Error::NonFinite { .. } => 3,
        Error::Checkpoint(_) | Error::Dimension { .. } => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let threads = mirgan_core::trainer::worker_threads();
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
        log::warn!("could not size the worker pool: {e}");
    }
    match commands::run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
