//! Crate-wide error type.

use std::fmt;

#[derive(Debug)]
pub enum Error {
    /// Tensor or parameter shapes do not line up.
    Shape(String),
    /// Invalid configuration value or unknown configuration key.
    Config(String),
    /// Argument outside the mathematical domain of an operation.
    Domain(String),
    /// Matrix inversion hit a (numerically) singular matrix.
    Singular(String),
    /// A computation produced NaN or infinity. `index` locates the offending
    /// coordinate or timestep when one is known.
    NonFinite { what: String, index: Option<usize> },
    /// Cube file does not start with the expected magic bytes.
    BadMagic { found: [u8; 4] },
    /// Cube file has an unsupported format version.
    VersionMismatch { found: u32 },
    /// Cube file payload is shorter than its header promises.
    TruncatedPayload { expected_bytes: usize, got_bytes: usize },
    /// Checkpoint file is malformed or its checksum does not match.
    Checkpoint(String),
    /// A metric is undefined on the given input.
    Metric(String),
    Io(std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(msg) => write!(f, "shape error: {msg}"),
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::Domain(msg) => write!(f, "domain error: {msg}"),
            Error::Singular(msg) => write!(f, "singular matrix: {msg}"),
            Error::NonFinite { what, index } => match index {
                Some(i) => write!(f, "non-finite value in {what} at index {i}"),
                None => write!(f, "non-finite value in {what}"),
            },
            Error::BadMagic { found } => {
                write!(f, "bad magic bytes {found:02x?}, expected \"M3SR\"")
            }
            Error::VersionMismatch { found } => {
                write!(f, "unsupported cube format version {found}")
            }
            Error::TruncatedPayload { expected_bytes, got_bytes } => write!(
                f,
                "truncated payload: expected {expected_bytes} bytes, got {got_bytes}"
            ),
            Error::Checkpoint(msg) => write!(f, "checkpoint error: {msg}"),
            Error::Metric(msg) => write!(f, "metric undefined: {msg}"),
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
