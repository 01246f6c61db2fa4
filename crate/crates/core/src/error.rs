use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("duplicate record id {0:?}")]
    DuplicateId(String),

    #[error("corpus is empty")]
    EmptyCorpus,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("optimizer step called with no populated gradients")]
    MissingGradients,

    #[error("non-finite loss {0}")]
    NonFinite(f64),

    #[error("no candidate pool contains a positive")]
    NoPositives,

    #[error("knowledge base is empty")]
    EmptyKnowledgeBase,

    #[error("unknown knowledge-base entry {0:?}")]
    UnknownCandidate(String),

    #[error("target sequence is empty")]
    EmptyTarget,

    #[error("no exemplar set for record {0:?}")]
    MissingExemplars(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("missing artifact {path}; run `{producer}` first")]
    MissingArtifact {
        path: PathBuf,
        producer: &'static str,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            line,
            message: message.into(),
        }
    }
}
