use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("question {id}: {message}")]
    InvalidQuestion { id: String, message: String },

    #[error("duplicate question id {0}")]
    DuplicateId(String),

    #[error("degenerate window: open_ts {open} >= close_ts {close}")]
    DegenerateWindow { open: i64, close: i64 },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    Dimension { expected: usize, actual: usize },

    #[error("probability {0} outside [0, 1]")]
    Domain(f64),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("forecast for unknown question {0}")]
    Alignment(String),

    #[error("market price {0} outside (0, 1)")]
    MarketPrice(f64),

    #[error("no preference pairs could be built")]
    NoPreferencePairs,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
