use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("duplicate node key {0:?}")]
    DuplicateKey(String),

    #[error("unknown node id {0}")]
    UnknownNode(usize),

    #[error("invalid hyperedge: {0}")]
    InvalidHyperedge(String),

    #[error("graph does not satisfy the heterogeneity requirement (|Tv| + |Te| = {0})")]
    NotHeterogeneous(usize),

    #[error("{source_name}:{line}: {message}")]
    Parse { source_name: String, line: usize, message: String },

    #[error("feature dimension mismatch: expected {expected}, found {found}")]
    DimMismatch { expected: usize, found: usize },

    #[error("missing feature vector for node {0:?}")]
    MissingFeature(String),

    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape { op: &'static str, left: (usize, usize), right: (usize, usize) },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("backward already ran on this tape; run forward again")]
    TapeConsumed,

    #[error("backward needs a scalar loss, got shape {0:?}")]
    NotScalar((usize, usize)),

    #[error("invalid split: {0}")]
    Split(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid fusion weights: {0}")]
    Fusion(String),

    #[error("metric undefined: {0}")]
    Metric(String),

    #[error("zero vector has no direction")]
    ZeroVector,

    #[error("unsupported format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
