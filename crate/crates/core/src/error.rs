// SPDX-License-Identifier: MIT OR Apache-2.0

//! Error type shared by every module of the crate.

use std::path::PathBuf;

/// Result alias used throughout `mifin_core`.
pub type Result<T> = std::result::Result<T, MifinError>;

#[derive(Debug, thiserror::Error)]
pub enum MifinError {
    #[error("failed to load {path}: {reason}")]
    Load { path: PathBuf, reason: String },

    #[error("shape mismatch for `{name}`: {detail}")]
    Shape { name: String, detail: String },

    #[error("unknown token id {0}")]
    TokenId(u32),

    #[error("input of {len} tokens exceeds context length {max}")]
    ContextLength { len: usize, max: usize },

    #[error("empty token sequence")]
    EmptyInput,

    #[error("intervention at {hook} does not fit: {detail}")]
    InterventionShape { hook: String, detail: String },

    #[error("invalid hook point {hook}: {detail}")]
    Hook { hook: String, detail: String },

    #[error("word {word:?} encodes to {n_tokens} tokens; try a leading-space variant such as {suggestion:?}")]
    MultiTokenWord {
        word: String,
        n_tokens: usize,
        suggestion: String,
    },

    #[error("corpus is empty")]
    EmptyCorpus,

    #[error("hook {0} is not a residual-width site and cannot back an activation store")]
    UnsupportedHook(String),

    #[error("row {row} out of range (store has {rows} rows)")]
    Index { row: usize, rows: usize },

    #[error("store at {path} was built from model {expected}, but the loaded model hashes to {found}")]
    ManifestMismatch {
        path: PathBuf,
        expected: String,
        found: String,
    },

    #[error("non-finite activation at row {row}")]
    NonFinite { row: usize },

    #[error("clean and corrupted prompts differ in length ({clean} vs {corrupted} tokens)")]
    PairLength { clean: usize, corrupted: usize },

    #[error("every prompt pair has equal clean and corrupted logit difference")]
    DegenerateCorpus,

    #[error("resample ablation needs at least two positions")]
    AblationDegenerate,

    #[error("training diverged at epoch {epoch}, step {step}")]
    TrainingDiverged { epoch: usize, step: usize },

    #[error("feature {feature} out of range (dictionary has {d_hid} features)")]
    FeatureId { feature: usize, d_hid: usize },

    #[error("could not assemble prompt: {0}")]
    PromptAssembly(String),

    #[error("empty query")]
    EmptyQuery,

    #[error("empty dataset")]
    EmptyDataset,

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("labeler request failed: {0}")]
    Labeler(String),

    #[error("catalog belongs to SAE {expected}, checkpoint hashes to {found}")]
    CatalogMismatch { expected: String, found: String },

    #[error("malformed record at line {line}: {reason}")]
    Record { line: usize, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl MifinError {
    pub(crate) fn load(path: impl Into<PathBuf>, reason: impl ToString) -> Self {
        Self::Load {
            path: path.into(),
            reason: reason.to_string(),
        }
    }

    pub(crate) fn shape(name: impl Into<String>, detail: impl Into<String>) -> Self {
        Self::Shape {
            name: name.into(),
            detail: detail.into(),
        }
    }

    /// Stable machine-readable code, used by the HTTP layer and CLI output.
    pub fn code(&self) -> &'static str {
        match self {
            Self::Load { .. } => "load_error",
            Self::Shape { .. } => "shape_error",
            Self::TokenId(_) => "token_id_error",
            Self::ContextLength { .. } => "context_length",
            Self::EmptyInput => "empty_input",
            Self::InterventionShape { .. } => "intervention_shape",
            Self::Hook { .. } => "hook_error",
            Self::MultiTokenWord { .. } => "multi_token_word",
            Self::EmptyCorpus => "empty_corpus",
            Self::UnsupportedHook(_) => "unsupported_hook",
            Self::Index { .. } => "index_error",
            Self::ManifestMismatch { .. } => "manifest_mismatch",
            Self::NonFinite { .. } => "non_finite",
            Self::PairLength { .. } => "pair_length",
            Self::DegenerateCorpus => "degenerate_corpus",
            Self::AblationDegenerate => "ablation_degenerate",
            Self::TrainingDiverged { .. } => "training_diverged",
            Self::FeatureId { .. } => "feature_id",
            Self::PromptAssembly(_) => "prompt_assembly",
            Self::EmptyQuery => "empty_query",
            Self::EmptyDataset => "empty_dataset",
            Self::InvalidParam(_) => "invalid_param",
            Self::Labeler(_) => "labeler_error",
            Self::CatalogMismatch { .. } => "catalog_mismatch",
            Self::Record { .. } => "record_error",
            Self::Io(_) => "io_error",
            Self::Json(_) => "json_error",
            Self::Csv(_) => "csv_error",
        }
    }

    /// True for errors caused by caller input rather than runtime failure.
    pub fn is_validation(&self) -> bool {
        !matches!(
            self,
            Self::Io(_) | Self::TrainingDiverged { .. } | Self::Labeler(_) | Self::NonFinite { .. }
        )
    }
}
