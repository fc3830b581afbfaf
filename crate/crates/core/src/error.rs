use diffcore::AdError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Autodiff(#[from] AdError),
    #[error("{what}: expected {expected}, got {got}")]
    DimMismatch { what: &'static str, expected: String, got: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("image carries no ground truth")]
    MissingGroundTruth,
    #[error("transient stack is identically zero")]
    ZeroTransient,
    #[error("{0} has zero norm")]
    ZeroNorm(&'static str),
    #[error("index {index} out of range for {len} {what}")]
    IndexOutOfRange { what: &'static str, index: usize, len: usize },
    #[error("feature level {level} exceeds maximum {max} for resolution {resolution}")]
    LevelTooDeep { level: usize, max: usize, resolution: usize },
    #[error("non-finite loss at step {step}: {breakdown}")]
    NonFiniteLoss { step: usize, breakdown: String },
    #[error("unsupported file version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn dims(what: &'static str, expected: impl std::fmt::Debug, got: impl std::fmt::Debug) -> Self {
        Error::DimMismatch { what, expected: format!("{expected:?}"), got: format!("{got:?}") }
    }
}
