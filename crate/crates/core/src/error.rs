use std::path::PathBuf;

use thiserror::Error;

use crate::LayerCombination;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value in softmax input at row {row}")]
    NonFiniteRow { row: usize },

    #[error("target index {index} out of range for vocabulary of {vocab}")]
    TargetOutOfRange { index: usize, vocab: usize },

    #[error("every target position is padding")]
    AllPadded,

    #[error("token id {token} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { token: usize, vocab: usize },

    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },

    #[error("layer combination {combo} invalid for a model with {n_max} encoder and {m_max} decoder layers")]
    InvalidCombination {
        combo: LayerCombination,
        n_max: usize,
        m_max: usize,
    },

    #[error("sequence of length {len} exceeds the maximum of {max}")]
    TooLong { len: usize, max: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("checkpoint configurations differ: {0}")]
    ConfigMismatch(String),

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("unknown token {0:?}")]
    UnknownToken(String),

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Format {
            what,
            detail: detail.into(),
        }
    }
}
