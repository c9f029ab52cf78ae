use thiserror::Error;

/// Errors produced across the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("coverage violated: state {state}{}", action.map(|a| format!(", action {a}")).unwrap_or_default())]
    Coverage { state: usize, action: Option<usize> },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("degenerate column {column}: zero variance")]
    DegenerateColumn { column: String },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("checkpoint mismatch: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn arg<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Argument(msg.into()))
}
