use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("embedding has zero norm")]
    ZeroNormEmbedding,

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("embedding contains a non-finite value at index {index}")]
    NonFiniteEmbedding { index: usize },

    #[error("embedding is empty")]
    EmptyEmbedding,

    #[error("labeled set is empty")]
    EmptyLabeledSet,

    #[error("no indicators registered")]
    NoIndicators,

    #[error("duplicate indicator `{0}`")]
    DuplicateIndicator(String),

    #[error("duplicate node id `{0}`")]
    DuplicateNode(String),

    #[error("unknown node id `{0}`")]
    UnknownNode(String),

    #[error("unknown indicator `{0}`")]
    UnknownIndicator(String),

    #[error("missing embedding: offset {offset} but blob holds {count} rows")]
    MissingEmbedding { offset: usize, count: usize },

    #[error("invalid bounding box ({x1}, {y1}, {x2}, {y2})")]
    InvalidBox { x1: f64, y1: f64, x2: f64, y2: f64 },

    #[error("invalid node `{node_id}`: {reason}")]
    InvalidNode { node_id: String, reason: String },

    #[error("seed node `{0}` has a fixed label and cannot be relabeled")]
    FixedLabel(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("unknown method `{0}`")]
    UnknownMethod(String),

    #[error("scene is empty")]
    EmptyScene,

    #[error("unknown scene `{0}`")]
    UnknownScene(String),

    #[error("infeasible synthetic spec: {0}")]
    InfeasibleSpec(String),

    #[error("reminiscence size {size} out of range (0..={max})")]
    SizeOutOfRange { size: usize, max: usize },

    #[error("invalid manifest: {0}")]
    InvalidManifest(String),

    #[error("invalid embedding blob: {0}")]
    InvalidBlob(String),

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

    /// I/O failures map to exit code 2, everything else is a validation failure.
    pub fn is_io(&self) -> bool {
        match self {
            Error::Io { .. } => true,
            Error::Json(e) => e.is_io(),
            Error::Csv(e) => e.is_io_error(),
            _ => false,
        }
    }
}
