// SPDX-License-Identifier: MIT OR Apache-2.0

//! Command-line surface. Field names double as config-file keys.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(name = "mifin", version, about = "Interpretability toolkit for GPT-2 family models")]
pub struct Cli {
    /// Model directory (config.json, model.safetensors, vocab.json, merges.txt).
    #[arg(long, global = true, env = "MIFIN_MODEL_DIR")]
    pub model_dir: Option<PathBuf>,
    /// Directory for outputs and the run manifest.
    #[arg(long, global = true, default_value = "mifin-out")]
    pub out: PathBuf,
    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    pub format: Format,
    /// TOML or JSON file of defaults; explicit flags win.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Json,
    Csv,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Top-k logit-lens grid for one prompt.
    Lens(LensArgs),
    /// Per-layer logit difference between two tokens, averaged over prompts.
    LogitDiff(LogitDiffArgs),
    /// Activation-patching scan over a prompt-pair corpus.
    PatchScan(PatchScanArgs),
    /// Resample-ablate one hook and measure the logit-difference change.
    Resample(ResampleArgs),
    /// Record a hook's activations over a corpus.
    StoreBuild(StoreBuildArgs),
    /// Train a sparse autoencoder on an activation store.
    SaeTrain(SaeTrainArgs),
    /// Reconstruction and sparsity metrics of an SAE on a store.
    SaeMetrics(SaeMetricsArgs),
    /// Strongest activating contexts of one feature.
    TopActs(TopActsArgs),
    /// Label features through the configured endpoint.
    AutoLabel(AutoLabelArgs),
    /// Ask the model to describe a feature injected into a placeholder word.
    SelfInterp(SelfInterpArgs),
    /// Agglomerative clustering of decoder directions.
    Cluster(ClusterArgs),
    /// Keyword search over a feature catalog.
    Search(SearchArgs),
    /// Share of active features that belong to a bias set.
    BiasScan(BiasScanArgs),
    /// Build a chunk index for retrieval.
    RagIndex(RagIndexArgs),
    /// Answer a question, retrieving context when the finance gate fires.
    RagAnswer(RagAnswerArgs),
    /// Train a decision tree on pooled SAE features.
    TreeTrain(TreeTrainArgs),
    /// Score a saved tree on a labeled dataset.
    TreeEval(TreeEvalArgs),
    /// Five-way sentiment confusion matrices, optionally steered.
    SentimentEval(SentimentEvalArgs),
    /// Write a small random model in the standard on-disk format.
    FixtureModel(FixtureModelArgs),
    /// Run the HTTP API.
    Serve(ServeArgs),
    /// Re-run a manifest and compare output hashes.
    Replay(ReplayArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Lens(_) => "lens",
            Command::LogitDiff(_) => "logit-diff",
            Command::PatchScan(_) => "patch-scan",
            Command::Resample(_) => "resample",
            Command::StoreBuild(_) => "store-build",
            Command::SaeTrain(_) => "sae-train",
            Command::SaeMetrics(_) => "sae-metrics",
            Command::TopActs(_) => "top-acts",
            Command::AutoLabel(_) => "auto-label",
            Command::SelfInterp(_) => "self-interp",
            Command::Cluster(_) => "cluster",
            Command::Search(_) => "search",
            Command::BiasScan(_) => "bias-scan",
            Command::RagIndex(_) => "rag-index",
            Command::RagAnswer(_) => "rag-answer",
            Command::TreeTrain(_) => "tree-train",
            Command::TreeEval(_) => "tree-eval",
            Command::SentimentEval(_) => "sentiment-eval",
            Command::FixtureModel(_) => "fixture-model",
            Command::Serve(_) => "serve",
            Command::Replay(_) => "replay",
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct LensArgs {
    #[arg(long)]
    pub prompt: String,
    #[arg(long, default_value_t = 5)]
    pub top_k: usize,
    /// Project raw residuals without the final layer norm.
    #[arg(long)]
    pub no_final_ln: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct LogitDiffArgs {
    /// Repeat for several prompts.
    #[arg(long, required_unless_present = "prompts_file")]
    pub prompt: Vec<String>,
    /// One prompt per line.
    #[arg(long)]
    pub prompts_file: Option<PathBuf>,
    #[arg(long, allow_hyphen_values = true)]
    pub token_a: String,
    #[arg(long, allow_hyphen_values = true)]
    pub token_b: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum GranularityArg {
    #[value(alias = "layer-head")]
    Head,
    #[value(alias = "layer-position")]
    Position,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DirectionArg {
    Denoising,
    Noising,
}

#[derive(Debug, Args, Serialize)]
pub struct PatchScanArgs {
    /// JSON-lines pairs {clean, corrupted, correct, incorrect}.
    #[arg(long, required_unless_present = "corpus", conflicts_with = "corpus")]
    pub pairs: Option<PathBuf>,
    /// Built-in corpus id (finance-pairs, finance-pairs-embedded).
    #[arg(long)]
    pub corpus: Option<String>,
    #[arg(long, value_enum, default_value_t = GranularityArg::Head)]
    pub granularity: GranularityArg,
    #[arg(long, value_enum, default_value_t = DirectionArg::Denoising)]
    pub direction: DirectionArg,
}

#[derive(Debug, Args, Serialize)]
pub struct ResampleArgs {
    #[arg(long)]
    pub prompt: String,
    /// Hook name, e.g. resid_post.6 or attn_z.3.
    #[arg(long)]
    pub hook: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, allow_hyphen_values = true)]
    pub token_a: String,
    #[arg(long, allow_hyphen_values = true)]
    pub token_b: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BuiltinCorpus {
    News,
    Loan,
    Rag,
    Headlines,
    Sentiment,
}

#[derive(Debug, Args, Serialize)]
pub struct CorpusArgs {
    /// JSON-lines corpus of {id, text}.
    #[arg(long, required_unless_present = "builtin", conflicts_with = "builtin")]
    pub corpus: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub builtin: Option<BuiltinCorpus>,
    /// Document count for generated built-ins (news, headlines).
    #[arg(long, default_value_t = 200)]
    pub n_docs: usize,
    /// Share of off-topic sentences in the news built-in.
    #[arg(long, default_value_t = 0.3)]
    pub p_general: f64,
    #[arg(long, default_value_t = 0)]
    pub corpus_seed: u64,
}

#[derive(Debug, Args, Serialize)]
pub struct StoreBuildArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub corpus: CorpusArgs,
    #[arg(long)]
    pub hook: String,
    #[arg(long)]
    pub max_tokens_per_doc: Option<usize>,
    #[arg(long)]
    pub shuffle_seed: Option<u64>,
    #[arg(long)]
    pub mean_center: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct SaeTrainArgs {
    #[arg(long)]
    pub store: PathBuf,
    #[arg(long)]
    pub d_hid: usize,
    #[arg(long)]
    pub alpha: f32,
    #[arg(long, default_value_t = 3)]
    pub epochs: usize,
    #[arg(long, default_value_t = 256)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f32,
    /// Seeds both initialization and batch order.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.1)]
    pub holdout: f32,
}

#[derive(Debug, Args, Serialize)]
pub struct SaeMetricsArgs {
    #[arg(long)]
    pub sae: PathBuf,
    #[arg(long)]
    pub store: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct TopActsArgs {
    #[arg(long)]
    pub sae: PathBuf,
    #[arg(long)]
    pub store: PathBuf,
    #[arg(long)]
    pub feature: usize,
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    #[arg(long, default_value_t = 8)]
    pub window: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct AutoLabelArgs {
    #[arg(long)]
    pub sae: PathBuf,
    #[arg(long)]
    pub store: PathBuf,
    /// Features to label (comma-separated); all when omitted.
    #[arg(long, value_delimiter = ',')]
    pub features: Vec<usize>,
    /// Existing catalog to update instead of starting fresh.
    #[arg(long)]
    pub catalog: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    #[arg(long, default_value_t = 8)]
    pub window: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeArg {
    AddDirection,
    ReconstructReplace,
}

#[derive(Debug, Args, Serialize)]
pub struct SelfInterpArgs {
    #[arg(long)]
    pub sae: PathBuf,
    #[arg(long)]
    pub feature: usize,
    /// Repeat or comma-separate for a sweep.
    #[arg(long, value_delimiter = ',', default_values_t = [0.0f32, 4.0, 8.0])]
    pub magnitude: Vec<f32>,
    #[arg(long, default_value = "X")]
    pub placeholder: String,
    #[arg(long, default_value_t = 32)]
    pub max_new_tokens: usize,
    #[arg(long, value_enum, default_value_t = ModeArg::AddDirection)]
    pub mode: ModeArg,
}

#[derive(Debug, Args, Serialize)]
pub struct ClusterArgs {
    #[arg(long)]
    pub sae: PathBuf,
    #[arg(long, default_value_t = 0.65)]
    pub tau: f64,
    /// Catalog supplying labels; an updated copy is written.
    #[arg(long)]
    pub catalog: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct SearchArgs {
    #[arg(long)]
    pub catalog: PathBuf,
    #[arg(long)]
    pub query: String,
}

#[derive(Debug, Args, Serialize)]
pub struct FeatureSetArgs {
    /// JSON list of feature ids.
    #[arg(long, conflicts_with = "features")]
    pub feature_set: Option<PathBuf>,
    /// Comma-separated feature ids.
    #[arg(long, value_delimiter = ',')]
    pub features: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightingArg {
    Count,
    Mass,
}

#[derive(Debug, Args, Serialize)]
pub struct BiasScanArgs {
    #[arg(long)]
    pub sae: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    pub bias: FeatureSetArgs,
    /// Repeat for several texts.
    #[arg(long)]
    pub text: Vec<String>,
    /// JSON-lines corpus of {id, text}.
    #[arg(long)]
    pub texts: Option<PathBuf>,
    /// Scan the built-in loan-application texts.
    #[arg(long)]
    pub builtin_loans: bool,
    #[arg(long, default_value_t = 0.33)]
    pub theta: f64,
    #[arg(long, value_enum, default_value_t = WeightingArg::Count)]
    pub weighting: WeightingArg,
}

#[derive(Debug, Args, Serialize)]
pub struct RagIndexArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub corpus: CorpusArgs,
    #[arg(long)]
    pub layer: usize,
    #[arg(long, default_value_t = 64)]
    pub window: usize,
    #[arg(long, default_value_t = 48)]
    pub stride: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct RagAnswerArgs {
    #[arg(long)]
    pub index: PathBuf,
    #[arg(long)]
    pub sae: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    pub finance: FeatureSetArgs,
    #[arg(long)]
    pub question: String,
    #[arg(long, default_value_t = 0.20)]
    pub threshold: f64,
    #[arg(long, default_value_t = 2)]
    pub k: usize,
    #[arg(long, default_value_t = 32)]
    pub max_new_tokens: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolingArg {
    Max,
    Mean,
}

#[derive(Debug, Args, Serialize)]
pub struct LabeledDataArgs {
    /// CSV with `text` and `label` columns.
    #[arg(long, required_unless_present = "builtin_headlines", conflicts_with = "builtin_headlines")]
    pub data: Option<PathBuf>,
    /// Use generated up/down headlines.
    #[arg(long)]
    pub builtin_headlines: bool,
    #[arg(long, default_value_t = 200)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub data_seed: u64,
    #[arg(long, value_enum, default_value_t = PoolingArg::Max)]
    pub pooling: PoolingArg,
}

#[derive(Debug, Args, Serialize)]
pub struct TreeTrainArgs {
    #[arg(long)]
    pub sae: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    pub data: LabeledDataArgs,
    #[arg(long, default_value_t = 4)]
    pub max_depth: usize,
    #[arg(long, default_value_t = 1)]
    pub min_samples_leaf: usize,
    /// Held-out share scored after training; 0 scores the training set.
    #[arg(long, default_value_t = 0.2)]
    pub test_fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args, Serialize)]
pub struct TreeEvalArgs {
    #[arg(long)]
    pub tree: PathBuf,
    #[arg(long)]
    pub sae: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    pub data: LabeledDataArgs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ScopeArg {
    All,
    Prompt,
    Generated,
}

#[derive(Debug, Args, Serialize)]
pub struct SentimentEvalArgs {
    /// CSV with `text` and `label` columns; the built-in fifty sentences when omitted.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// SAE for steering; with --feature, a steered matrix is produced too.
    #[arg(long, requires = "feature")]
    pub sae: Option<PathBuf>,
    #[arg(long, requires = "sae")]
    pub feature: Option<usize>,
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    pub magnitude: f32,
    #[arg(long, value_enum, default_value_t = ModeArg::AddDirection)]
    pub mode: ModeArg,
    /// Which positions steering touches.
    #[arg(long, value_enum, default_value_t = ScopeArg::All)]
    pub steer_scope: ScopeArg,
}

#[derive(Debug, Args, Serialize)]
pub struct FixtureModelArgs {
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    #[arg(long, default_value_t = 2)]
    pub heads: usize,
    #[arg(long, default_value_t = 8)]
    pub d_model: usize,
    #[arg(long, default_value_t = 32)]
    pub d_mlp: usize,
    #[arg(long, default_value_t = 1024)]
    pub context_len: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Store a separate output head instead of tying it to the embedding.
    #[arg(long)]
    pub explicit_head: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: std::net::SocketAddr,
    /// SAE checkpoint directories to register (repeatable).
    #[arg(long)]
    pub sae: Vec<PathBuf>,
    /// Activation stores, paired with --sae by order.
    #[arg(long)]
    pub store: Vec<PathBuf>,
    /// Chunk indexes as ID=FILE, gated with the first SAE (repeatable).
    #[arg(long)]
    pub index: Vec<String>,
    #[command(flatten)]
    #[serde(flatten)]
    pub finance: FeatureSetArgs,
    #[arg(long, default_value_t = mifin_server::DEFAULT_WORKERS)]
    pub workers: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct ReplayArgs {
    /// A `<subcommand>.manifest.json` written by an earlier run.
    pub manifest: PathBuf,
}
