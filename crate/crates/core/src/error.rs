use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("non-finite value produced by `{op}` (tape node {node})")]
    NonFinite { op: &'static str, node: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("too many malformed lines: {bad} of {total}")]
    TooManyMalformed { bad: usize, total: usize },

    #[error("no usable data: {0}")]
    EmptyData(String),

    #[error("anomaly injection infeasible: {0}")]
    Infeasible(String),

    #[error("non-finite loss at batch {batch} of epoch {epoch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("node count mismatch: {what} has {found} nodes, expected {expected}")]
    NodeMismatch {
        what: String,
        expected: usize,
        found: usize,
    },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("missing artifact `{}`: {what}", path.display())]
    MissingArtifact { path: PathBuf, what: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short category name used for CLI exit reporting.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Shape(_) | Error::InvalidArgument(_) => "usage",
            Error::NonFinite { .. } | Error::NonFiniteLoss { .. } => "numeric",
            Error::Parse { .. } | Error::TooManyMalformed { .. } | Error::EmptyData(_) => "data",
            Error::Infeasible(_) => "data",
            Error::NodeMismatch { .. } => "mismatch",
            Error::Config(_) => "config",
            Error::MissingArtifact { .. } => "missing",
            Error::Checkpoint(_) | Error::Json(_) | Error::Csv(_) => "format",
            Error::Io { .. } => "io",
        }
    }
}
