//! Error type shared by every module in the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("zero-norm vector in {context}")]
    ZeroNorm { context: &'static str },

    #[error("non-finite value in {context}")]
    NonFinite { context: &'static str },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },

    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("invalid parameter {name}: {reason}")]
    InvalidParam { name: &'static str, reason: String },

    #[error("{what} is frozen")]
    Frozen { what: &'static str },

    #[error("{what} must be frozen before this step")]
    NotFrozen { what: &'static str },

    #[error("class {class} has no stored prototype")]
    MissingClass { class: u32 },

    #[error("no accuracy record for model={model} client={client} task={task} round={round}")]
    MissingRecord {
        model: &'static str,
        client: usize,
        task: usize,
        round: usize,
    },

    #[error("operation unsupported: {0}")]
    Unsupported(&'static str),

    #[error("infeasible configuration: {0}")]
    Infeasible(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("{path}:{line}: {reason}")]
    MalformedRow {
        path: String,
        line: usize,
        reason: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
