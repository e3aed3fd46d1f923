use thiserror::Error;

use crate::cvae::LimbCvae;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("non-finite input at frame {frame}")]
    NonFiniteInput { frame: usize },

    #[error("zero-length segment {parent}->{child} at frame {frame}")]
    ZeroLengthSegment {
        frame: usize,
        parent: usize,
        child: usize,
    },

    #[error("normalization context does not match recording: {0}")]
    ContextMismatch(String),

    #[error("recording too short: {frames} frames, need at least {needed}")]
    RecordingTooShort { frames: usize, needed: usize },

    #[error("window too short: {frames} frames, need at least {needed}")]
    WindowTooShort { frames: usize, needed: usize },

    #[error("non-finite gradient")]
    NonFiniteGradient,

    #[error("non-finite loss")]
    NonFiniteLoss,

    #[error("training diverged at step {step}")]
    Diverged {
        step: usize,
        last_good: Box<LimbCvae>,
    },

    #[error("degenerate variance in goal inference")]
    DegenerateVariance,

    #[error("degenerate data: all dimensions have zero variance")]
    DegenerateData,

    #[error("group too small: {0} points, need at least 2")]
    GroupTooSmall(usize),

    #[error("target unreachable: distance {distance:.4} m outside [{min:.4}, {max:.4}]")]
    TargetUnreachable { distance: f64, min: f64, max: f64 },

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
