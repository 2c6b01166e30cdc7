use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible for an operation.
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    /// Caller violated a documented precondition.
    #[error("contract violated: {0}")]
    Contract(String),

    /// A value became non-finite or left its numeric domain.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Configuration is invalid or incomplete.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Not enough samples in a (class, environment) cell.
    #[error("insufficient samples for class {class} in environment {env}: need {need}, have {have}")]
    Capacity {
        class: usize,
        env: usize,
        need: usize,
        have: usize,
    },

    /// An experiment-protocol rule was broken (missing validation set, empty bucket, ...).
    #[error("protocol error: {0}")]
    Protocol(String),

    /// A name index outside the branch vocabulary.
    #[error("index {index} outside vocabulary of size {size}")]
    Vocabulary { index: usize, size: usize },

    /// The statistic is undefined for the supplied input.
    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
