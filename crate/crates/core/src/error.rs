use std::path::PathBuf;

use thiserror::Error;

/// Errors produced across the library.
#[derive(Debug, Error)]
pub enum Error {
    /// A field holds NaN or infinity.
    #[error("rejected input: {0}")]
    RejectedInput(String),

    #[error("degenerate covariance: smallest scale {0:e} is below the floor")]
    DegenerateCovariance(f64),

    #[error("configuration error: {0}")]
    Config(String),

    /// Config file problem pinned to a line.
    #[error("{path}:{line}: {msg}")]
    ConfigLine {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("insufficient candidates: need at least 2, got {0}")]
    InsufficientCandidates(usize),

    #[error("insufficient support: need at least {need} pixels, got {got}")]
    InsufficientSupport { need: usize, got: usize },

    #[error("view synthesis shortfall: requested {requested} views, only {accepted} survived the checks")]
    Shortfall { requested: usize, accepted: usize },

    #[error("degenerate baseline: camera centers coincide")]
    DegenerateBaseline,

    #[error("invalid probability {value} at ({row}, {col})")]
    InvalidProbability { row: usize, col: usize, value: f64 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("schema error: missing property `{0}`")]
    MissingProperty(String),

    #[error("parse error at byte {offset}: {msg}")]
    Parse { offset: usize, msg: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn parse(offset: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            offset,
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
