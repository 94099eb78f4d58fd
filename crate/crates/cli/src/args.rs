use std::path::PathBuf;
use std::sync::OnceLock;

use clap::{Args, Parser, Subcommand, ValueEnum};
use halloc_core::corpus::SCHEMA_VERSION;
use halloc_core::features::FEATURE_LAYOUT_VERSION;
use halloc_core::harness::{RateDenominator, Regime};
use halloc_core::predict::{EncoderKind, RecurrentCell, MODEL_FORMAT_VERSION};
use halloc_core::{FeatureMode, Language};

fn version() -> &'static str {
    static LINE: OnceLock<String> = OnceLock::new();
    LINE.get_or_init(|| {
        format!(
            "{} (instance schema {SCHEMA_VERSION}, feature layout {FEATURE_LAYOUT_VERSION}, model format {MODEL_FORMAT_VERSION})",
            halloc_core::VERSION
        )
    })
}

#[derive(Debug, Parser)]
#[command(name = "halloc", version = version(), about = "Localize and predict hallucinated tokens in LLM-generated code")]
pub struct Cli {
    /// Directory that relative input and output paths are resolved against.
    #[arg(long, global = true, env = "HALLOC_DATA_DIR", value_name = "DIR")]
    pub data_dir: Option<PathBuf>,

    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check an instance file (and optionally a canonical file) against the schema.
    Validate(ValidateArgs),
    /// Alpha-rename the user-defined identifiers of a program.
    Normalize(NormalizeArgs),
    /// Fill in the hallucination token index of every instance.
    Localize(LocalizeArgs),
    /// Convert instances into a feature container.
    Featurize(FeaturizeArgs),
    /// Train a predictor on labeled instances and save it.
    Train(TrainArgs),
    /// Apply a saved predictor to instances.
    Predict(PredictArgs),
    /// Cross-validated accuracy under a split regime.
    Eval(EvalArgs),
    /// Cross-LLM generalization matrix.
    Cross(CrossArgs),
    /// Token-type hallucination rates, type proportions and signal distributions.
    Analyze(AnalyzeArgs),
    /// Run the worked example: a generated `<` where every canonical uses `>`.
    #[command(name = "demo-figure1")]
    DemoFigure1,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Lang {
    Python,
    Java,
}

impl From<Lang> for Language {
    fn from(l: Lang) -> Self {
        match l {
            Lang::Python => Language::Python,
            Lang::Java => Language::Java,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    PerToken,
    PerSample,
}

impl From<Mode> for FeatureMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::PerToken => FeatureMode::PerToken,
            Mode::PerSample => FeatureMode::PerSample,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Encoder {
    Recurrent,
    Convolutional,
    Attention,
}

impl From<Encoder> for EncoderKind {
    fn from(e: Encoder) -> Self {
        match e {
            Encoder::Recurrent => EncoderKind::Recurrent,
            Encoder::Convolutional => EncoderKind::Convolutional,
            Encoder::Attention => EncoderKind::Attention,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Cell {
    Lstm,
    Gru,
}

impl From<Cell> for RecurrentCell {
    fn from(c: Cell) -> Self {
        match c {
            Cell::Lstm => RecurrentCell::Lstm,
            Cell::Gru => RecurrentCell::Gru,
        }
    }
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    /// Instance file (JSON Lines).
    #[arg(long = "in", value_name = "FILE")]
    pub input: PathBuf,
    /// Canonical-solution file (JSON Lines).
    #[arg(long, value_name = "FILE")]
    pub canon: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct NormalizeArgs {
    #[arg(long, value_enum)]
    pub lang: Lang,
    /// Source file; standard input when omitted or `-`.
    #[arg(long = "in", value_name = "FILE")]
    pub input: Option<PathBuf>,
    /// Output file; standard output when omitted.
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct JobsArg {
    /// Worker threads for record-level parallelism (0 = all cores).
    #[arg(long, default_value_t = 0, value_name = "N")]
    pub jobs: usize,
}

#[derive(Debug, Args)]
pub struct LocalizeArgs {
    /// Require every instance to be in this language.
    #[arg(long, value_enum)]
    pub lang: Option<Lang>,
    #[arg(long = "in", value_name = "FILE")]
    pub input: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub canon: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// Also write per-canonical mismatch indices, one JSON line per instance.
    #[arg(long, value_name = "FILE")]
    pub debug_out: Option<PathBuf>,
    #[command(flatten)]
    pub jobs: JobsArg,
}

#[derive(Debug, Args)]
pub struct FeaturizeArgs {
    #[arg(long, value_enum)]
    pub lang: Option<Lang>,
    #[arg(long = "in", value_name = "FILE")]
    pub input: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "per-token")]
    pub mode: Mode,
    /// Seed recorded in the container header.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub jobs: JobsArg,
}

/// Model selection and training hyperparameters.
#[derive(Debug, Args)]
pub struct ModelArgs {
    #[arg(long, value_enum)]
    pub mode: Mode,
    /// Per-token classifier (`tree-ensemble`, `linear-logistic`, `feed-forward`)
    /// or pointer model kind. `eval` and `cross` also accept `oracle` and
    /// `constant-<index>`.
    #[arg(long, value_name = "KIND")]
    pub model: Option<String>,
    /// Encoder family of the per-sample pointer model.
    #[arg(long, value_enum)]
    pub encoder: Option<Encoder>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Correct rows kept per hallucinated row for per-token training.
    #[arg(long)]
    pub downsample_ratio: Option<f64>,
    #[arg(long)]
    pub trees: Option<usize>,
    #[arg(long)]
    pub max_depth: Option<usize>,
    /// Hidden units of the per-token feed-forward classifier.
    #[arg(long)]
    pub ff_hidden: Option<usize>,
    #[arg(long)]
    pub hidden_dim: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    /// Feed-forward width inside attention layers.
    #[arg(long)]
    pub ff_dim: Option<usize>,
    #[arg(long)]
    pub kernel_size: Option<usize>,
    #[arg(long, value_enum)]
    pub cell: Option<Cell>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long = "in", value_name = "FILE")]
    pub input: PathBuf,
    /// Where to write the model file.
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub jobs: JobsArg,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long = "model-file", value_name = "FILE")]
    pub model_file: PathBuf,
    #[arg(long = "in", value_name = "FILE")]
    pub input: PathBuf,
    /// Predictions as JSON Lines; standard output when omitted.
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
    /// Score at or above which the per-token scan flags a token.
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    #[command(flatten)]
    pub jobs: JobsArg,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long = "in", value_name = "FILE")]
    pub input: PathBuf,
    #[arg(long, value_parser = parse_regime, default_value = "all-in-one")]
    pub regime: Regime,
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    /// Directory for the CSV and JSON reports.
    #[arg(long, value_name = "DIR")]
    pub out_dir: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub jobs: JobsArg,
}

#[derive(Debug, Args)]
pub struct CrossArgs {
    #[arg(long = "in", value_name = "FILE")]
    pub input: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    #[arg(long, value_name = "DIR")]
    pub out_dir: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub jobs: JobsArg,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(long = "in", value_name = "FILE")]
    pub input: PathBuf,
    #[arg(long, value_name = "DIR")]
    pub out_dir: PathBuf,
    /// Tokens counted in the denominator of a type's hallucination rate.
    #[arg(long, value_parser = parse_denominator, default_value = "prefix")]
    pub rate_denominator: RateDenominator,
    #[command(flatten)]
    pub jobs: JobsArg,
}

fn parse_regime(s: &str) -> Result<Regime, String> {
    s.parse()
}

fn parse_denominator(s: &str) -> Result<RateDenominator, String> {
    s.parse()
}
