use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "OPSC_OUT";

#[derive(Debug, Parser)]
#[command(name = "opsc", version, about = "Opcode-sequence vulnerability classifier for EVM bytecode")]
pub struct Cli {
    /// Run configuration (TOML). Unknown keys are rejected.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Seed overriding the configuration's `seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Output directory. Defaults to `$OPSC_OUT/<command>`, or
    /// `runs/<command>` when the variable is unset.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Disassemble bytecode into opcode mnemonics.
    Disasm(DisasmArgs),
    /// Write a synthetic labelled corpus with one planted motif per class.
    Synth(SynthArgs),
    /// Ingest, deduplicate, split and build the vocabulary.
    Prep(PrepArgs),
    /// Write only the split manifest for a corpus.
    Split(SplitArgs),
    /// Learning-rate range test.
    LrFind(LrFindArgs),
    /// Pretrain the language model.
    TrainLm(TrainLmArgs),
    /// Fine-tune the classifier.
    TrainClf(TrainClfArgs),
    /// Score a classifier checkpoint or a predictions file.
    Eval(EvalArgs),
    /// Classify raw bytecode.
    Predict(PredictArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Disasm(_) => "disasm",
            Command::Synth(_) => "synth",
            Command::Prep(_) => "prep",
            Command::Split(_) => "split",
            Command::LrFind(_) => "lr-find",
            Command::TrainLm(_) => "train-lm",
            Command::TrainClf(_) => "train-clf",
            Command::Eval(_) => "eval",
            Command::Predict(_) => "predict",
        }
    }
}

#[derive(Debug, Args)]
pub struct DisasmArgs {
    /// File holding hex bytecode.
    #[arg(required_unless_present = "hex", conflicts_with = "hex")]
    pub file: Option<PathBuf>,
    #[arg(long)]
    pub hex: Option<String>,
    /// Emit `{"tokens": [...], "byte_len": N}`.
    #[arg(long)]
    pub json: bool,
    /// Map every PUSH width to a bare `PUSH`.
    #[arg(long)]
    pub collapse_push: bool,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub per_class: Option<usize>,
    #[arg(long)]
    pub mean_len: Option<usize>,
    #[arg(long)]
    pub len_jitter: Option<usize>,
}

#[derive(Debug, Args)]
pub struct PrepArgs {
    /// Corpus file (line-delimited JSON).
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub collapse_push: bool,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[arg(long)]
    pub corpus: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LrTarget {
    Lm,
    Clf,
}

#[derive(Debug, Args)]
pub struct LrFindArgs {
    /// Directory written by `prep`.
    #[arg(long)]
    pub prep: PathBuf,
    #[arg(long, value_enum, default_value = "lm")]
    pub target: LrTarget,
    /// Language-model checkpoint whose encoder the classifier starts from.
    #[arg(long)]
    pub lm: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainLmArgs {
    #[arg(long)]
    pub prep: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainClfArgs {
    #[arg(long)]
    pub prep: PathBuf,
    /// Pretrained language-model checkpoint.
    #[arg(long, required_unless_present = "random_encoder", conflicts_with = "random_encoder")]
    pub lm: Option<PathBuf>,
    /// Start from a randomly initialised encoder instead.
    #[arg(long)]
    pub random_encoder: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitName {
    Train,
    Valid,
    Test,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Classifier checkpoint; requires `--prep`.
    #[arg(long, requires = "prep", required_unless_present = "predictions", conflicts_with = "predictions")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub prep: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitName,
    /// CSV with `actual,predicted[,p1,p2,p3,p4]` columns (1-based types).
    #[arg(long)]
    pub predictions: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Vocabulary file from `prep`.
    #[arg(long)]
    pub vocab: PathBuf,
    /// File holding hex bytecode.
    #[arg(required_unless_present = "hex", conflicts_with = "hex")]
    pub file: Option<PathBuf>,
    #[arg(long)]
    pub hex: Option<String>,
}
