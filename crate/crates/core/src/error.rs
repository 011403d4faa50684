//! Crate-wide error type.

use std::fmt;

/// Errors surfaced by the pipeline.
///
/// Shape/parameter/index errors are programming-contract violations that name
/// the offending values; the IO-flavored variants carry enough context to
/// identify the failing file or tensor.
#[derive(Debug)]
pub enum Error {
    /// Tensor shapes incompatible with the requested operation.
    Shape(String),
    /// An argument outside its documented range (e.g. dropout p >= 1).
    Param(String),
    /// An id or index outside a valid range (vocabulary, class, axis).
    Index(String),
    /// A contract precondition was violated (e.g. backward on a non-scalar).
    Contract(String),
    /// Configuration rejected during validation.
    Config(String),
    /// Checkpoint or tensor file failed an integrity check.
    Integrity(String),
    /// Malformed input file (dataset line, vocabulary, image).
    Parse(String),
    Io(std::io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(m) => write!(f, "shape error: {m}"),
            Error::Param(m) => write!(f, "parameter error: {m}"),
            Error::Index(m) => write!(f, "index error: {m}"),
            Error::Contract(m) => write!(f, "contract error: {m}"),
            Error::Config(m) => write!(f, "config error: {m}"),
            Error::Integrity(m) => write!(f, "integrity error: {m}"),
            Error::Parse(m) => write!(f, "parse error: {m}"),
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

pub type Result<T> = std::result::Result<T, Error>;
