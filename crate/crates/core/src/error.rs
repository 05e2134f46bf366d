use thiserror::Error;

/// Error type shared across the crate.
#[derive(Debug, Error)]
pub enum DashError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("zero-norm vector in {0}")]
    ZeroNorm(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unknown layer state code {0} (expected one of 0, 1, 2, 4)")]
    UnknownState(u8),

    #[error("path constraint violated: {0}")]
    PathConstraint(String),

    #[error("layer index {index} out of range [1, {layers}]")]
    LayerIndexOutOfRange { index: usize, layers: usize },

    #[error("base-model training did not converge: {0}")]
    NonConvergence(String),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("calibration failed: {0}")]
    Calibration(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, DashError>;
