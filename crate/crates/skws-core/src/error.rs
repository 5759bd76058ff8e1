//! Error types shared across the engine.

use std::fmt;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors emitted by tensor kernels, model assembly, file formats, streaming
/// sessions, and training.
#[derive(Debug)]
pub enum Error {
    /// Two matrices cannot be combined under the named operation.
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    /// A constructor received data whose length does not match rows x cols.
    DataLength {
        rows: usize,
        cols: usize,
        got: usize,
    },
    /// A softmax row had every entry masked out.
    AllMaskedRow { row: usize },
    /// A configuration value violates an invariant.
    InvalidConfig(String),
    /// An operation received inputs that violate its preconditions.
    InvalidInput(String),
    /// A streaming layer cache was driven out of protocol (wrong block size,
    /// reuse after a partial final block, spec mismatch).
    CacheMismatch(String),
    /// The session was pushed to or finished after it was already closed.
    SessionClosed,
    /// A score was requested before any frame had been emitted.
    NoEmissions,
    /// A file did not start with the expected magic bytes.
    BadMagic {
        expected: &'static str,
        found: Vec<u8>,
    },
    /// A file declared a format version this build does not read.
    UnsupportedVersion { format: &'static str, version: u16 },
    /// A binary file ended before its declared payload.
    Truncated(String),
    /// A text file line could not be parsed.
    MalformedLine { line: usize, detail: String },
    /// A stored tensor does not match the shape derived from the embedded config.
    TensorMismatch { name: String, detail: String },
    /// A value that must be finite was NaN or infinite.
    NonFinite { context: String },
    /// Training produced a non-finite loss.
    Diverged { epoch: usize, detail: String },
    /// Underlying I/O failure.
    Io(std::io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, left, right } => write!(
                f,
                "{op}: incompatible shapes {}x{} and {}x{}",
                left.0, left.1, right.0, right.1
            ),
            Error::DataLength { rows, cols, got } => write!(
                f,
                "data length {got} does not match {rows}x{cols} = {}",
                rows * cols
            ),
            Error::AllMaskedRow { row } => {
                write!(f, "softmax row {row} has every entry masked")
            }
            Error::InvalidConfig(msg) => write!(f, "invalid config: {msg}"),
            Error::InvalidInput(msg) => write!(f, "invalid input: {msg}"),
            Error::CacheMismatch(msg) => write!(f, "streaming cache misuse: {msg}"),
            Error::SessionClosed => write!(f, "session already finished"),
            Error::NoEmissions => write!(f, "no frames emitted yet"),
            Error::BadMagic { expected, found } => {
                write!(f, "bad magic: expected {expected:?}, found {found:?}")
            }
            Error::UnsupportedVersion { format, version } => {
                write!(f, "{format}: unsupported version {version}")
            }
            Error::Truncated(what) => write!(f, "truncated file: {what}"),
            Error::MalformedLine { line, detail } => {
                write!(f, "malformed line {line}: {detail}")
            }
            Error::TensorMismatch { name, detail } => {
                write!(f, "tensor {name}: {detail}")
            }
            Error::NonFinite { context } => write!(f, "non-finite value in {context}"),
            Error::Diverged { epoch, detail } => {
                write!(f, "training diverged at epoch {epoch}: {detail}")
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
