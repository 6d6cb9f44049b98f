use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {message}")]
    MalformedRow { line: u64, message: String },

    #[error("line {line}: invalid response value `{value}` (expected 0 or 1)")]
    InvalidResponse { line: u64, value: String },

    #[error("unknown column `{0}`")]
    UnknownColumn(String),

    #[error("missing column `{0}`")]
    MissingColumn(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("cannot split: {0}")]
    CannotSplit(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("AUC undefined: {0}")]
    AucUndefined(String),

    #[error("non-finite loss in {phase} at epoch {epoch}: {detail}")]
    NonFinite {
        phase: String,
        epoch: usize,
        detail: String,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("unsupported format version {found} in {what} (expected {expected})")]
    FormatVersion {
        what: String,
        found: u32,
        expected: u32,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
