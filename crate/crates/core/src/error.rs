use std::path::PathBuf;

use sega_autodiff::AutodiffError;
use thiserror::Error;

use crate::graph::Violation;

#[derive(Debug, Error)]
pub enum SegaError {
    #[error("{}:{line}: {msg}", file.display())]
    Parse { file: PathBuf, line: u64, msg: String },

    #[error("invalid graph: {}", .0.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
    InvalidGraph(Vec<Violation>),

    #[error("unknown node `{0}`")]
    UnknownNode(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("configuration: {0}")]
    Config(String),

    #[error("embedding: {0}")]
    Embedding(String),

    #[error("embedding service failed after {attempts} attempts: {msg}")]
    EmbeddingRetryable { attempts: u32, msg: String },

    #[error("language model: {0}")]
    Llm(String),

    #[error("user `{0}` has no posts")]
    NoPosts(String),

    #[error(transparent)]
    Autodiff(#[from] AutodiffError),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl SegaError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures of the numeric machinery (non-finite values,
    /// degenerate similarities) as opposed to bad data or configuration.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Self::Autodiff(AutodiffError::NonFinite { .. } | AutodiffError::Numeric { .. })
        )
    }
}

pub type Result<T, E = SegaError> = std::result::Result<T, E>;
