use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dimension mismatch: {what} (expected {expected}, got {got})")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("layer index {index} out of range for a net with {layers} layers")]
    LayerIndex { index: usize, layers: usize },

    #[error("negative variance or activity: {0}")]
    NegativeVariance(String),

    /// The unit's rotated basis is undefined because its weight vector is zero.
    #[error("weight vector has zero norm; the w-direction is undefined")]
    SingularDirection,

    /// The unit-wise Fisher block is (numerically) singular.
    #[error("singular unit Fisher block (A00 = {a00:e}, D = {d:e})")]
    SingularFisher { a00: f64, d: f64 },

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("parameter count {count} exceeds the dense Fisher cap {cap}")]
    TooManyParameters { count: usize, cap: usize },

    #[error("malformed parameter file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
