//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("MagicMismatch: expected {expected:?}, found {found:?}")]
    MagicMismatch { expected: String, found: String },

    #[error("VersionUnsupported: version {found} (supported: {supported})")]
    VersionUnsupported { found: u16, supported: u16 },

    #[error("ShapeMismatch: tensor {tensor}: {detail}")]
    ShapeMismatch { tensor: String, detail: String },

    #[error("NonFiniteValue: tensor {tensor} contains {kind} at flat index {index}")]
    NonFiniteValue {
        tensor: String,
        kind: String,
        index: usize,
    },

    #[error("IoFailure: {context}: {source}")]
    IoFailure {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("TruncatedFile: {0}")]
    TruncatedFile(String),

    #[error("BadHeader: {0}")]
    BadHeader(String),

    #[error("EmptyInput: {0}")]
    EmptyInput(String),

    #[error("BadBits: k = {0} outside supported range [2, 8]")]
    BadBits(u8),

    #[error("CodeOutOfRange: code {code} exceeds max {max} for k = {k}")]
    CodeOutOfRange { code: u8, max: u8, k: u8 },

    #[error("CountMismatch: {0}")]
    CountMismatch(String),

    #[error("DimensionMismatch: {0}")]
    DimensionMismatch(String),

    #[error("CorruptMask: {0}")]
    CorruptMask(String),

    #[error("NotPositiveDefinite: pivot {pivot:.3e} at column {column} after damping {damping:.3e}")]
    NotPositiveDefinite {
        column: usize,
        pivot: f64,
        damping: f64,
    },

    #[error("ZeroSamples: Hessian has no accumulated calibration samples")]
    ZeroSamples,

    #[error("NonPositiveDiagonal: inverse-Hessian diagonal entry {value:.3e} at index {index}")]
    NonPositiveDiagonal { index: usize, value: f64 },

    #[error("ZeroPivot: inverse-Hessian pivot {value:.3e} at column {column}")]
    ZeroPivot { column: usize, value: f64 },

    #[error("MissingPrefix: general supervision at layer {layer} requires {required} packed upstream layers, found {found}")]
    MissingPrefix {
        layer: usize,
        required: usize,
        found: usize,
    },

    #[error("EmptySample: {0}")]
    EmptySample(String),

    #[error("UnknownFormat: {0}")]
    UnknownFormat(String),

    #[error("InvalidConfig: {0}")]
    InvalidConfig(String),

    #[error("InvalidModel: {0}")]
    InvalidModel(String),
}

impl Error {
    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::IoFailure {
            context: context.into(),
            source,
        }
    }
}
