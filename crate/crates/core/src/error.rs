use std::path::PathBuf;

use mdt_tensor::TensorError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dataset root not found: {}", .0.display())]
    DatasetRootNotFound(PathBuf),
    #[error("empty domain {0}")]
    EmptyDomain(String),
    #[error("cannot decode image {}: {reason}", path.display())]
    Decode { path: PathBuf, reason: String },
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("FEN manifest mismatch: {0}")]
    FenManifestMismatch(String),
    #[error("input too small for layer {layer}: {detail}")]
    InputTooSmall { layer: String, detail: String },
    #[error("unknown domain {domain} (model has {available} transfer modules)")]
    UnknownDomain { domain: usize, available: usize },
    #[error("non-finite loss in component {0}")]
    NonFiniteLoss(String),
    #[error("embedder mismatch: {0} vs {1}")]
    EmbedderMismatch(String, String),
    #[error("insufficient samples: {0}")]
    InsufficientSamples(String),
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error("config hash mismatch: checkpoint has {stored}, expected {expected}")]
    ConfigHashMismatch { stored: String, expected: String },
    #[error("archive {}: {reason}", path.display())]
    Archive { path: PathBuf, reason: String },
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

impl Error {
    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { context: context.into(), source }
    }
}
