use std::path::PathBuf;

use tagmt_tensor::TensorError;
use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{0}: no well-formed records")]
    EmptyCorpus(String),

    #[error(
        "direction {direction}: {needed} held-out pairs requested but only {available} available"
    )]
    InsufficientPairs {
        direction: String,
        needed: usize,
        available: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("tokenizer: {0}")]
    Tokenizer(String),

    #[error("model: {0}")]
    Model(String),

    #[error("non-finite gradient in parameter {0}")]
    NonFiniteGradient(String),

    #[error("optimizer: {0}")]
    Optimizer(String),

    #[error("metric: {0}")]
    Metric(String),

    #[error("format: {0}")]
    Format(String),

    #[error(transparent)]
    Tensor(#[from] TensorError),

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

    /// Short, stable class name used in machine-readable error lines.
    pub fn class(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::EmptyCorpus(_) => "empty_corpus",
            Error::InsufficientPairs { .. } => "insufficient_pairs",
            Error::Config(_) => "config",
            Error::Tokenizer(_) => "tokenizer",
            Error::Model(_) => "model",
            Error::NonFiniteGradient(_) => "non_finite_gradient",
            Error::Optimizer(_) => "optimizer",
            Error::Metric(_) => "metric",
            Error::Format(_) => "format",
            Error::Tensor(_) => "tensor",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}
