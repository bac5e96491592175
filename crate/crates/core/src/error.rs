use alloc::string::String;

/// Errors raised by the numeric core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("degenerate input: {0}")]
    Degenerate(&'static str),
    #[error("dimension mismatch: expected {expected:?}, found {found:?}")]
    DimensionMismatch {
        expected: (usize, usize, usize),
        found: (usize, usize, usize),
    },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("rotation magnitude {0} is outside the principal range [0, pi)")]
    OutOfDomain(f64),
    #[error("invalid depth {0}")]
    InvalidDepth(f64),
    #[error("invalid transform: {0}")]
    InvalidTransform(&'static str),
    #[error("no valid pixels overlap between reference and live view")]
    EmptyOverlap,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("backward called before forward")]
    NoForwardCache,
    #[error("loss diverged at step {step}")]
    Divergence { step: usize },
    #[error("camera is inside the scene geometry at frame {0}")]
    CameraInsideGeometry(usize),
}

pub type Result<T> = core::result::Result<T, Error>;
