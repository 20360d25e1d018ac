use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid MDP: {0}")]
    InvalidMdp(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("index out of range: {0}")]
    IndexOutOfRange(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("MDP is evaluation-only (rewards outside [0, 1]); it cannot back a generative model")]
    EvaluationOnly,

    #[error("anchor set empty after {retries} resampling attempts")]
    EmptyAnchorSet { retries: usize },

    #[error("observed blocks disagree on the anchor intersection at ({state}, {action}): {row_value} vs {col_value}")]
    InconsistentBlocks {
        state: usize,
        action: usize,
        row_value: f64,
        col_value: f64,
    },

    #[error("division by zero: {0}")]
    DivisionByZero(String),

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse: {0}")]
    Parse(String),
}

impl Error {
    pub(crate) fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }
}
