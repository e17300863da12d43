//! `adgen`: build data, pre-train, fine-tune, generate, evaluate and
//! gradient-check from the command line.
//!
//! Exit codes: 0 on success, 1 on internal failure (including a failed
//! gradient check), 2 on usage, config or input errors.

mod commands;
pub mod config;
pub mod manifest;

use std::ffi::OsString;
use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

pub use config::FileConfig;
pub use manifest::RunManifest;

/// Environment variable naming the config file when `--config` is absent.
pub const CONFIG_ENV: &str = "ADGEN_CONFIG";

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, config or input data (exit code 2).
    Usage(String),
    /// Anything else (exit code 1).
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Failed(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Failed(m) => f.write_str(m),
        }
    }
}

impl From<adgen_core::Error> for CliError {
    fn from(e: adgen_core::Error) -> Self {
        if e.is_user_error() {
            CliError::Usage(e.to_string())
        } else {
            CliError::Failed(e.to_string())
        }
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "adgen",
    version,
    about = "Aspect-controlled ad-text generation pipeline"
)]
pub struct Cli {
    /// TOML config file; flags take precedence over its values.
    #[arg(long, global = true, env = CONFIG_ENV)]
    pub config: Option<PathBuf>,

    /// Seed for all randomness (default: config `seed`, else 0).
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Filter, extract aspects, mask and split into JSONL datasets.
    BuildData(BuildDataArgs),
    /// Stage 1: aspect-controlled masked pre-training.
    Pretrain(PretrainArgs),
    /// Stage 2: fine-tuning on A/B pairs with an optional contrastive term.
    Finetune(FinetuneArgs),
    /// Beam-decode ad texts for a data split.
    Generate(GenerateArgs),
    /// BLEU-4 and ROUGE against the higher-CTR targets.
    Evaluate(EvaluateArgs),
    /// Finite-difference check of every training objective.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
pub struct BuildDataArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Generate a synthetic corpus instead of reading one.
    #[arg(long, conflicts_with_all = ["reviews", "absamples"])]
    pub synth: bool,
    /// Review corpus (JSONL).
    #[arg(long, requires = "absamples")]
    pub reviews: Option<PathBuf>,
    /// A/B samples (JSONL).
    #[arg(long, requires = "reviews")]
    pub absamples: Option<PathBuf>,
    #[arg(long)]
    pub n_reviews: Option<usize>,
    #[arg(long)]
    pub n_absamples: Option<usize>,
    /// Number of aspect terms to extract.
    #[arg(long)]
    pub aspects: Option<usize>,
    /// Triples per review at most.
    #[arg(long)]
    pub per_review: Option<usize>,
}

#[derive(Args, Debug, Clone)]
pub struct TrainFlags {
    /// Directory written by build-data.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for checkpoints, log and report.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Stop after this many optimizer steps.
    #[arg(long)]
    pub max_steps: Option<usize>,
    /// Dev evaluation interval in steps (0 = once per epoch).
    #[arg(long)]
    pub eval_every: Option<usize>,
}

#[derive(Args, Debug)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub train: TrainFlags,
    #[arg(long, default_value = "full", value_parser = ["full", "no_mask", "no_control"])]
    pub pretrain_variant: String,
}

#[derive(Args, Debug)]
pub struct FinetuneArgs {
    #[command(flatten)]
    pub train: TrainFlags,
    /// Checkpoint directory to start from (for example `<pretrain out>/best`).
    #[arg(long)]
    pub init_from: Option<PathBuf>,
    #[arg(long, value_parser = ["margin", "infonce", "none"])]
    pub contrastive: Option<String>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    /// With `--contrastive none`, keep the NLL of the lower-CTR target.
    #[arg(long)]
    pub keep_negative_nll: bool,
    /// Length-normalize log-probabilities inside the margin loss.
    #[arg(long)]
    pub length_normalize: bool,
    /// Stage-1 variant the init checkpoint came from (`skip` forbids `--init-from`).
    #[arg(long, value_parser = ["full", "no_mask", "no_control", "skip"])]
    pub pretrain_variant: Option<String>,
}

#[derive(Args, Debug, Clone)]
pub struct DecodeFlags {
    /// Directory written by build-data.
    #[arg(long)]
    pub data: PathBuf,
    /// Which split of the A/B data to use.
    #[arg(long, default_value = "test", value_parser = ["train", "dev", "test"])]
    pub split: String,
    #[arg(long)]
    pub out: PathBuf,
    /// Beam width.
    #[arg(long)]
    pub beam: Option<usize>,
    #[arg(long)]
    pub max_len: Option<usize>,
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub decode: DecodeFlags,
    /// File of blocked tokens, one per line; adds a `passed` flag per generation.
    #[arg(long)]
    pub blocklist: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(
        long,
        required_unless_present = "oracle_copy",
        conflicts_with = "oracle_copy"
    )]
    pub checkpoint: Option<PathBuf>,
    /// Score a stub that copies the reference target.
    #[arg(long)]
    pub oracle_copy: bool,
    #[command(flatten)]
    pub decode: DecodeFlags,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 32)]
    pub vocab_size: usize,
    #[arg(long)]
    pub eps: Option<f64>,
    /// Coordinates sampled per parameter tensor.
    #[arg(long)]
    pub coords: Option<usize>,
    /// Optional directory for a JSON report and manifest.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Maximum relative error the gradient check accepts.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

/// Parses `args` (program name first), runs the command and maps the result
/// to an exit code.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let file = match &cli.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    let seed = cli.seed.or(file.seed).unwrap_or(0);
    let ctx = commands::Context { file, seed };
    match cli.command {
        Command::BuildData(a) => commands::build_data(&ctx, &a),
        Command::Pretrain(a) => commands::pretrain(&ctx, &a),
        Command::Finetune(a) => commands::finetune(&ctx, &a),
        Command::Generate(a) => commands::generate(&ctx, &a),
        Command::Evaluate(a) => commands::evaluate(&ctx, &a),
        Command::Gradcheck(a) => commands::gradcheck(&ctx, &a),
    }
}
