use thiserror::Error;

use crate::data::npy::NpyError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("trainable parameter `{0}` has no gradient")]
    MissingGrad(String),

    #[error("sigma_s = 0 has no soft posterior; use hard labels instead")]
    HardLabelMode,

    #[error("value out of floating-point range: {0}")]
    Range(String),

    #[error("state version mismatch: expected {expected:#018x}, found {found:#018x}")]
    VersionMismatch { expected: u64, found: u64 },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Npy(#[from] NpyError),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// Short stable identifier used in machine-readable diagnostics.
    pub fn code(&self) -> &'static str {
        match self {
            Error::ShapeMismatch { .. } => "shape",
            Error::InvalidArgument(_) => "invalid-argument",
            Error::NonScalarLoss(_) => "non-scalar-loss",
            Error::NonFinite { .. } => "non-finite",
            Error::MissingGrad(_) => "missing-grad",
            Error::HardLabelMode => "hard-label-mode",
            Error::Range(_) => "range",
            Error::VersionMismatch { .. } => "version",
            Error::Checkpoint(_) => "checkpoint",
            Error::Divergence(_) => "divergence",
            Error::Config(_) => "config",
            Error::Npy(_) => "npy",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}
