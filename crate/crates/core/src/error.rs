use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("events not sorted by timestamp: event {index} (t={t}) precedes its predecessor (t={prev})")]
    Unsorted { index: usize, t: u64, prev: u64 },

    #[error("event {index} at ({x}, {y}) lies outside the {width}x{height} sensor")]
    OutOfBounds {
        index: usize,
        x: u16,
        y: u16,
        width: u16,
        height: u16,
    },

    #[error("event {index} (t={t}) predates the stream position {start}")]
    StaleEvent { index: usize, t: u64, start: u64 },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("bin {bin} out of range for {bins} bins")]
    BinOutOfRange { bin: usize, bins: usize },

    #[error("negative event count {0}")]
    NegativeCount(i64),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    #[error("mask selects no patches")]
    EmptyMask,

    #[error("trail region is empty")]
    EmptyRegion,

    #[error("depth must be positive, got {0}")]
    NonPositiveDepth(f64),

    #[error("resume state does not match: {0}")]
    ResumeMismatch(String),

    #[error("training diverged at step {step}")]
    Diverged { step: usize },

    #[error("malformed {kind} data: {reason}")]
    Format { kind: &'static str, reason: String },

    #[error("scene file: {0}")]
    Scene(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_mismatch(expected: impl ToString, actual: impl ToString) -> Error {
    Error::ShapeMismatch {
        expected: expected.to_string(),
        actual: actual.to_string(),
    }
}
