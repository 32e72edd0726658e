use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("backward called without a recorded forward graph")]
    NoForward,

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("{what} has no active entries")]
    EmptySupport { what: String },

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid genotype: {0}")]
    Genotype(String),

    #[error("support mismatch: {0} vs {1} entries")]
    SupportMismatch(usize, usize),

    #[error("zero vector in cosine similarity")]
    ZeroVector,

    #[error("missing checkpoints in trajectory: {0:?}")]
    MissingCheckpoints(Vec<usize>),

    #[error("missing artifact {path}: {reason}")]
    MissingArtifact { path: PathBuf, reason: String },

    #[error("schema error in {file}: {message}")]
    Schema { file: String, message: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable tag, used by the CLI error record.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::NoForward => "no_forward",
            Error::NonScalarLoss(_) => "non_scalar_loss",
            Error::EmptySupport { .. } => "empty_support",
            Error::NonFinite { .. } => "non_finite",
            Error::Config(_) => "config",
            Error::Genotype(_) => "genotype",
            Error::SupportMismatch(..) => "support_mismatch",
            Error::ZeroVector => "zero_vector",
            Error::MissingCheckpoints(_) => "missing_checkpoints",
            Error::MissingArtifact { .. } => "missing_artifact",
            Error::Schema { .. } => "schema",
            Error::Io { .. } => "io",
            Error::Csv(_) => "csv",
            Error::Json(_) => "json",
        }
    }
}
