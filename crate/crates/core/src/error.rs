use thiserror::Error;

/// Errors raised by the sampling, adaptation and model routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty input")]
    Empty,

    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// The proposal density vanishes at a draw, so it cannot dominate the target.
    #[error("proposal log density is -inf at draw {0}")]
    ProposalNotDominating(usize),

    #[error("standard importance sampling needs normalized weights; use the self-normalized estimator")]
    UnnormalizedWeights,

    #[error("all importance weights are zero")]
    DegenerateWeights,

    #[error("degenerate weighted moments: {0}")]
    DegenerateMoments(String),

    #[error("weighted covariance is rank deficient beyond the jitter budget")]
    RankDeficient,

    #[error("transform unavailable: {0}")]
    TransformUnavailable(String),

    #[error("model evaluation failed: {0}")]
    Model(String),

    #[error("sampler failure: {0}")]
    Sampler(String),

    #[error("data error: {0}")]
    Data(String),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
