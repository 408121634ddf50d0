use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate representation: centered Frobenius norm {norm:e} below 1e-9")]
    DegenerateRepresentation { norm: f64 },

    #[error("bad geometry: {0}")]
    BadGeometry(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("training diverged at epoch {epoch}, step {step}: loss is not finite")]
    DivergedTraining { epoch: usize, step: usize },

    #[error("training accuracy {accuracy:.4} below floor {floor:.4}")]
    BelowAccuracyFloor { accuracy: f64, floor: f64 },

    #[error("index out of range: {0}")]
    IndexOutOfRange(String),

    #[error("sample already contains the trigger")]
    TriggerCollision,

    #[error("poison rate {0} outside [0.10, 0.20]")]
    RateOutOfRange(f64),

    #[error("zoo build failed: {failed} of {total} entries missed the health floors")]
    ZooBuildFailure { failed: usize, total: usize },

    #[error("empty zoo")]
    EmptyZoo,

    #[error("empty clean sample set")]
    EmptyCleanSet,

    #[error("insufficient discriminator training data: {0}")]
    InsufficientTrainingData(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
