use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("token id {token} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },

    #[error("context of {len} positions exceeds max_context {max}")]
    ContextOverflow { len: usize, max: usize },

    #[error("layer {layer} out of range for a {num_layers}-layer model")]
    LayerOutOfRange { layer: usize, num_layers: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("malformed file: {0}")]
    Format(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("fingerprint mismatch: expected {expected:016x}, found {actual:016x}")]
    FingerprintMismatch { expected: u64, actual: u64 },

    #[error("no predictor loaded for active layer {0}")]
    MissingPredictor(usize),

    #[error("missing artifact {}", .0.display())]
    MissingArtifact(PathBuf),

    #[error("cache state: {0}")]
    CacheState(String),

    #[error("length mismatch: {0}")]
    LengthMismatch(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
