//! `focal`: generate synthetic corpora, train projection models, and inspect
//! retrieval metrics, pair scores and attention maps.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use focal_core::attention::DEFAULT_SCALE;
use focal_core::{FocalError, ScoreDirection, Variant};

use commands::ConfigError;

#[derive(Debug, Parser)]
#[command(
    name = "focal",
    version,
    about = "Focal attention for image-text matching"
)]
struct Cli {
    /// Where to write the run manifest. Defaults to `<output>.manifest.json`
    /// for commands with an output path and to stderr otherwise.
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic corpus from a JSON generator config.
    Generate {
        #[arg(long)]
        config: PathBuf,
        /// Corpus directory to create.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a projection model on a corpus.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        /// JSON with optional `model`, `train`, `focal` and `loss` sections.
        /// Missing fields take their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Checkpoint path; the loss log goes to `<out>.losses.json`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Retrieval metrics of a checkpoint on a corpus.
    Eval {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Attention variant. Defaults to the checkpoint's. `ensemble`
        /// averages the scores of `--checkpoint` and `--ensemble-checkpoint`,
        /// each under its own stored variant.
        #[arg(long, value_enum)]
        variant: Option<VariantArg>,
        #[arg(long)]
        ensemble_checkpoint: Option<PathBuf>,
        /// Which directional relevance is ranked.
        #[arg(long, value_enum, default_value_t = DirectionArg::Both)]
        direction: DirectionArg,
        /// Recall cutoffs.
        #[arg(long, value_delimiter = ',', default_values_t = [1usize, 5])]
        ks: Vec<usize>,
        /// Multiplier on cosine similarities before the softmax.
        #[arg(long, default_value_t = DEFAULT_SCALE)]
        scale: f64,
        /// Machine-readable metrics, one object per metric.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score one text against one image.
    Score {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        text: String,
        #[arg(long)]
        image: String,
        #[arg(long, value_enum)]
        variant: Option<FocalVariantArg>,
        /// Multiplier on cosine similarities before the softmax.
        #[arg(long, default_value_t = DEFAULT_SCALE)]
        scale: f64,
    },
    /// Dump preassigned weights, focal scores, mask and reassigned weights for
    /// every query fragment of one text-image pair.
    Attend {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        text: String,
        #[arg(long)]
        image: String,
        #[arg(long, value_enum, default_value_t = AttendDirection::T2i)]
        direction: AttendDirection,
        #[arg(long, value_enum)]
        variant: Option<FocalVariantArg>,
        /// Multiplier on cosine similarities before the softmax.
        #[arg(long, default_value_t = DEFAULT_SCALE)]
        scale: f64,
        /// Write the dump here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum VariantArg {
    Plain,
    Equal,
    Prob,
    Ensemble,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum FocalVariantArg {
    Plain,
    Equal,
    Prob,
}

impl From<FocalVariantArg> for Variant {
    fn from(v: FocalVariantArg) -> Self {
        match v {
            FocalVariantArg::Plain => Variant::Plain,
            FocalVariantArg::Equal => Variant::Equal,
            FocalVariantArg::Prob => Variant::Prob,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum DirectionArg {
    Both,
    T2i,
    I2t,
}

impl From<DirectionArg> for ScoreDirection {
    fn from(d: DirectionArg) -> Self {
        match d {
            DirectionArg::Both => ScoreDirection::Both,
            DirectionArg::T2i => ScoreDirection::TextToImage,
            DirectionArg::I2t => ScoreDirection::ImageToText,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum AttendDirection {
    T2i,
    I2t,
}

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_DIVERGENCE: u8 = 4;

fn exit_code(err: &anyhow::Error) -> (u8, &'static str) {
    for cause in err.chain() {
        if cause.is::<ConfigError>() || cause.is::<serde_json::Error>() {
            return (EXIT_CONFIG, "config");
        }
        if let Some(e) = cause.downcast_ref::<FocalError>() {
            return match e {
                FocalError::Config(_) => (EXIT_CONFIG, "config"),
                FocalError::Divergence(_) => (EXIT_DIVERGENCE, "divergence"),
                FocalError::Internal(_) => (EXIT_FAILURE, "internal"),
                _ => (EXIT_DATA, "data"),
            };
        }
    }
    (EXIT_FAILURE, "error")
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let (code, category) = exit_code(&err);
            eprintln!("focal [{category}]: {err:#}");
            ExitCode::from(code)
        }
    }
}
