//! Crate-wide error type.

use std::fmt;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors produced by tensor math, model configuration and the artifact
/// persistence layer. Persistence failures are split into distinct variants
/// so callers can tell a truncated blob from a stale manifest.
#[derive(Debug)]
pub enum Error {
    /// Operands have incompatible shapes.
    ShapeMismatch { expected: String, got: String },
    /// An index exceeded its bound (e.g. token id >= codebook size).
    IndexOutOfBounds { index: usize, bound: usize },
    /// Invalid configuration (bad hyper-parameter, missing component).
    Config(String),
    /// A function evaluation produced a non-finite value.
    NonFinite(String),
    /// Training aborted because the loss went NaN at the given step.
    NanLoss { step: usize },
    /// A dataset entry could not be ingested.
    Ingestion { entry: String, reason: String },
    /// Checkpoint manifest failed to parse.
    ManifestParse(String),
    /// Checkpoint blob is shorter than the manifest demands.
    TruncatedBlob { needed: u64, actual: u64 },
    /// Manifest tensor entries overlap or run past the blob.
    OffsetOverlap(String),
    /// Checkpoint format version is not one we understand.
    VersionMismatch { found: String, expected: String },
    /// Cached token dataset was produced by a different tokenizer.
    FingerprintMismatch { cached: String, current: String },
    /// A codeword is never used in the dataset.
    EmptyCodeword { codeword: usize, hint: String },
    Io(std::io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { expected, got } => {
                write!(f, "shape mismatch: expected {expected}, got {got}")
            }
            Error::IndexOutOfBounds { index, bound } => {
                write!(f, "index {index} out of bounds (< {bound} required)")
            }
            Error::Config(msg) => write!(f, "configuration error: {msg}"),
            Error::NonFinite(what) => write!(f, "non-finite value in {what}"),
            Error::NanLoss { step } => {
                write!(f, "training loss became NaN at step {step}; last good checkpoint retained")
            }
            Error::Ingestion { entry, reason } => {
                write!(f, "cannot ingest dataset entry `{entry}`: {reason}")
            }
            Error::ManifestParse(msg) => write!(f, "checkpoint manifest parse error: {msg}"),
            Error::TruncatedBlob { needed, actual } => {
                write!(f, "checkpoint blob truncated: need {needed} bytes, have {actual}")
            }
            Error::OffsetOverlap(msg) => write!(f, "checkpoint manifest offsets invalid: {msg}"),
            Error::VersionMismatch { found, expected } => {
                write!(f, "checkpoint format `{found}` unsupported (expected `{expected}`)")
            }
            Error::FingerprintMismatch { cached, current } => write!(
                f,
                "token cache fingerprint {cached} does not match tokenizer {current}; re-run tokenize"
            ),
            Error::EmptyCodeword { codeword, hint } => {
                write!(f, "codeword {codeword} never used in dataset ({hint})")
            }
            Error::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

/// Shorthand for constructing a shape-mismatch error from two debug-printable shapes.
pub(crate) fn shape_err<T: std::fmt::Debug, U: std::fmt::Debug>(expected: T, got: U) -> Error {
    Error::ShapeMismatch {
        expected: format!("{expected:?}"),
        got: format!("{got:?}"),
    }
}
