use thiserror::Error;

/// Errors shared across the library.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument violated a shape contract (dimensions, lengths).
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A model or network specification is invalid.
    #[error("invalid spec: {0}")]
    InvalidSpec(String),

    /// A run configuration is invalid.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// SPD factorization failed even after escalating diagonal jitter.
    /// Carries every jitter level that was attempted.
    #[error("conditioning failure: factorization failed at jitter levels {attempted:?}")]
    Conditioning { attempted: Vec<f64> },

    /// The sketch least-squares system lost rank.
    #[error("rank-deficient sketch: {0}")]
    RankDeficientSketch(String),

    /// The operation is not defined for this model or activation.
    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serialization(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
