use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("mask selects no positions")]
    EmptyMask,

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("invalid model config: {0}")]
    InvalidConfig(String),

    #[error("invalid adapter spec: {0}")]
    InvalidAdapterSpec(String),

    #[error("tree has no adapter parameters")]
    NoAdapters,

    #[error("unknown parameter path `{0}`")]
    UnknownPath(String),

    #[error("gradient supplied for frozen parameter `{0}`")]
    FrozenGradient(String),

    #[error("missing gradient for trainable parameter `{0}`")]
    MissingGradient(String),

    #[error("client {0} has an empty shard")]
    EmptyShard(usize),

    #[error("dataset has {examples} examples, fewer than {clients} clients")]
    TooFewExamples { examples: usize, clients: usize },

    #[error("invalid dataset spec: {0}")]
    InvalidDataSpec(String),

    #[error("invalid masking request: {0}")]
    InvalidMasking(String),

    #[error("sample budget mismatch: federated {federated} vs centralized {centralized}")]
    BudgetMismatch { federated: u64, centralized: u64 },

    #[error("checkpoint carries {found} adapters but config requests {requested}")]
    VariantMismatch { found: String, requested: String },

    #[error("missing file `{}`", .0.display())]
    MissingFile(PathBuf),

    #[error("malformed file: {0}")]
    Format(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
