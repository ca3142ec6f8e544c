use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("quaternion block {what} is not normalizable")]
    ZeroQuaternion { what: String },

    #[error("sequence is not normalized: {0}")]
    NotNormalized(String),

    #[error("sequence too short: {what} needs at least {min} frames, got {got}")]
    SequenceTooShort {
        what: &'static str,
        min: usize,
        got: usize,
    },

    #[error("insufficient views: need at least 2 confident observations, got {got}")]
    InsufficientViews { got: usize },

    #[error("degenerate camera geometry: {0}")]
    DegenerateGeometry(String),

    #[error("covariance is not positive semidefinite (min eigenvalue {min_eigenvalue:e})")]
    NotPsd { min_eigenvalue: f64 },

    #[error("normal equations are numerically rank deficient ({0})")]
    NumericalRank(String),

    #[error("denoiser returned shape {got:?}, expected {expected:?}")]
    DenoiserShape {
        expected: (usize, usize),
        got: (usize, usize),
    },

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported file version {found} (this build reads version {supported})")]
    UnsupportedVersion { found: u16, supported: u16 },

    #[error("truncated file: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("malformed file: {0}")]
    Format(String),

    #[error("schedule hash mismatch: model was trained for a different noise schedule")]
    ScheduleMismatch,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
