//! Error types shared across the crate.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("rule references unknown hint `{0}`")]
    RuleReferencesUnknownHint(String),

    #[error("invalid hint config at line {line}: {msg}")]
    HintConfig { line: usize, msg: String },

    #[error("invalid spec: {0}")]
    InvalidSpec(String),

    #[error("unknown table `{0}`")]
    UnknownTable(String),

    #[error("unknown operator `{0}`")]
    UnknownOperator(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: usize, actual: usize },

    #[error("non-positive input to q-error: {0}")]
    NonPositiveInput(f64),

    #[error("non-finite gradient at step {step}; parameters rolled back")]
    NonFiniteGradient { step: u64 },

    #[error("empty training set for class {0}")]
    EmptyClass(String),

    #[error("no workload statistics for `{0}`")]
    UnknownWorkload(String),

    #[error("experience store unavailable: {0}")]
    StoreUnavailable(String),

    #[error("catalog digest mismatch: expected {expected}, found {found}")]
    DigestMismatch { expected: String, found: String },

    #[error("compile of hintset {hintset} failed: {source}")]
    Compile {
        hintset: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: PathBuf, msg: String },

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Stable machine-readable tag used by the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::RuleReferencesUnknownHint(_) => "RuleReferencesUnknownHint",
            Error::HintConfig { .. } => "HintConfig",
            Error::InvalidSpec(_) => "InvalidSpec",
            Error::UnknownTable(_) => "UnknownTable",
            Error::UnknownOperator(_) => "UnknownOperator",
            Error::ShapeMismatch { .. } => "ShapeMismatch",
            Error::NonPositiveInput(_) => "NonPositiveInput",
            Error::NonFiniteGradient { .. } => "NonFiniteGradient",
            Error::EmptyClass(_) => "EmptyClass",
            Error::UnknownWorkload(_) => "UnknownWorkload",
            Error::StoreUnavailable(_) => "StoreUnavailable",
            Error::DigestMismatch { .. } => "DigestMismatch",
            Error::Compile { .. } => "Compile",
            Error::Checkpoint { .. } => "Checkpoint",
            Error::Config(_) => "Config",
            Error::Io(_) => "Io",
            Error::Json(_) => "Json",
            Error::Csv(_) => "Csv",
        }
    }
}
