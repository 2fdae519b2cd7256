//! `atomotion` command-line pipeline.
//!
//! Every parameter can come from a flag or from the `[subcommand]` table of
//! the `--config` TOML file (keys are flag names with underscores); flags
//! win. Each output gets a `<output>.manifest.json` with the resolved
//! parameters, seeds and hashes of every file read and written.

mod commands;
mod dataset;
mod error;
mod live;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use atomotion::exec::Execution;

#[derive(Parser)]
#[command(name = "atomotion", version, about = "Atomic motion decomposition, tokenization, alignment and generation")]
struct Cli {
    /// TOML file with one table per subcommand.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run batch loops on one thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
#[allow(clippy::large_enum_variant)]
enum Command {
    /// Describe a motion as per-period, per-body-part phrases.
    Decompose(DecomposeArgs),
    /// Fit conversion thresholds to a set of motions.
    Calibrate(CalibrateArgs),
    /// Train residual codebooks on a set of motions.
    TokenizeTrain(TokenizeTrainArgs),
    /// Encode a motion into a token CSV.
    Tokenize(TokenizeArgs),
    /// Decode a token CSV back into a motion.
    Detokenize(DetokenizeArgs),
    /// Train the text-motion alignment model on a paired dataset.
    AlignTrain(AlignTrainArgs),
    /// Retrieval scores of an alignment model; optionally export embeddings.
    AlignEval(AlignEvalArgs),
    /// Split a raw motion text into atomic phrases with a language model.
    Atomize(AtomizeArgs),
    /// Generate token sequences and motions from texts and atomic phrases.
    Generate(GenerateArgs),
    /// Distribution and retrieval metrics over embedding files.
    Metrics(MetricsArgs),
}

#[derive(Args)]
pub struct DecomposeArgs {
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub periods: Option<usize>,
    /// Conversion thresholds JSON (default thresholds if absent).
    #[arg(long)]
    pub thresholds: Option<PathBuf>,
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Args)]
pub struct CalibrateArgs {
    #[arg(long, num_args = 1..)]
    pub inputs: Option<Vec<PathBuf>>,
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Args)]
pub struct TokenizeTrainArgs {
    #[arg(long, num_args = 1..)]
    pub inputs: Option<Vec<PathBuf>>,
    #[arg(long)]
    pub codebook_size: Option<usize>,
    #[arg(long)]
    pub residual_layers: Option<usize>,
    #[arg(long)]
    pub downsample: Option<usize>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Args)]
pub struct TokenizeArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Args)]
pub struct DetokenizeArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Frame rate of the motions the codebooks were trained on.
    #[arg(long)]
    pub fps: Option<f64>,
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Args)]
pub struct AlignTrainArgs {
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub downsample: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Args)]
pub struct AlignEvalArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub downsample: Option<usize>,
    /// Write motion embeddings of the dataset as a matrix file.
    #[arg(long)]
    pub motion_features: Option<PathBuf>,
    /// Write text embeddings of the dataset as a matrix file.
    #[arg(long)]
    pub text_features: Option<PathBuf>,
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransportMode {
    /// Answer from recorded fixtures only.
    Replay,
    /// Call the endpoint and record the exchange.
    Record,
    /// Call the endpoint without recording.
    Live,
}

#[derive(Args)]
pub struct AtomizeArgs {
    #[arg(long, value_enum)]
    pub mode: Option<TransportMode>,
    /// JSON array of demonstrations `{input, output}`.
    #[arg(long)]
    pub examples: Option<PathBuf>,
    #[arg(long)]
    pub fixtures: Option<PathBuf>,
    #[arg(long)]
    pub text: Option<String>,
    /// Suggested number of periods.
    #[arg(long)]
    pub periods: Option<usize>,
    /// Summarize this fine-grained description instead of splitting the text alone.
    #[arg(long)]
    pub description: Option<PathBuf>,
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub align_model: Option<PathBuf>,
    #[arg(long)]
    pub rvq_model: Option<PathBuf>,
    /// Trained generator weights.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// Paired dataset with atomic texts to train the generator on.
    #[arg(long)]
    pub train_data: Option<PathBuf>,
    #[arg(long)]
    pub train_steps: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub save_weights: Option<PathBuf>,
    #[arg(long)]
    pub blocks: Option<usize>,
    #[arg(long)]
    pub model_dim: Option<usize>,
    /// Iterative decoding steps.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub temperature: Option<f64>,
    /// Token slots per generated sequence.
    #[arg(long)]
    pub slots: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub fps: Option<f64>,
    #[arg(long)]
    pub text: Option<String>,
    #[arg(long)]
    pub atomic: Option<PathBuf>,
    /// JSON `{"prompts": [{"text", "atomic"}]}`, paths relative to the file.
    #[arg(long)]
    pub prompts: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Args)]
pub struct MetricsArgs {
    #[arg(long)]
    pub real: Option<PathBuf>,
    #[arg(long)]
    pub gen: Option<PathBuf>,
    /// Text embeddings paired row by row with `--gen`.
    #[arg(long)]
    pub text: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub rprecision_k: Option<Vec<usize>>,
    #[arg(long)]
    pub diversity_pairs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub output: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let exec = if cli.sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    };
    let config = cli.config.as_deref();
    let result = match cli.command {
        Command::Decompose(a) => commands::decompose(a, config),
        Command::Calibrate(a) => commands::calibrate(a, config, exec),
        Command::TokenizeTrain(a) => commands::tokenize_train(a, config, exec),
        Command::Tokenize(a) => commands::tokenize(a, config, exec),
        Command::Detokenize(a) => commands::detokenize(a, config),
        Command::AlignTrain(a) => commands::align_train(a, config, exec),
        Command::AlignEval(a) => commands::align_eval(a, config, exec),
        Command::Atomize(a) => commands::atomize(a, config),
        Command::Generate(a) => commands::generate(a, config, exec),
        Command::Metrics(a) => commands::metrics(a, config),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("atomotion: {e}");
            ExitCode::from(e.code)
        }
    }
}
