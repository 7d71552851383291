//! Error type shared by every module of the engine.

use std::fmt;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Operand dimensions do not line up.
    Shape(String),
    /// A mask operation received a mask with no foreground pixels.
    EmptyMask,
    /// A partition was requested into more parts than there are foreground pixels.
    InsufficientPixels {
        requested: usize,
        available: usize,
    },
    /// A weighted mean was requested over an all-zero weight mask.
    EmptySupport,
    /// Mask prediction was invoked with a prototype bank holding no entries.
    EmptyBank,
    /// A target map referenced a class index outside the bank.
    BadLabel {
        label: usize,
        classes: usize,
    },
    /// A gradient carried a non-finite value; the optimizer step was rejected.
    NonFiniteGradient,
    /// An episode was malformed (missing support, wrong shot count, ...).
    Episode(String),
    /// A file did not conform to its on-disk format; `offset` is the byte
    /// position at which decoding failed.
    Format {
        offset: u64,
        message: String,
    },
    /// A run configuration was rejected.
    Config(String),
    /// A synthetic scene specification was degenerate.
    Spec(String),
    Io(String),
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn format(offset: u64, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: msg.into(),
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(msg) => write!(f, "shape mismatch: {msg}"),
            Error::EmptyMask => write!(f, "mask has no foreground pixels"),
            Error::InsufficientPixels {
                requested,
                available,
            } => write!(
                f,
                "cannot split into {requested} parts: only {available} foreground pixels"
            ),
            Error::EmptySupport => write!(f, "mask weights sum to zero; no support for the mean"),
            Error::EmptyBank => write!(f, "prototype bank is empty"),
            Error::BadLabel { label, classes } => {
                write!(f, "target label {label} out of range for {classes} classes")
            }
            Error::NonFiniteGradient => write!(f, "non-finite gradient; step rejected"),
            Error::Episode(msg) => write!(f, "invalid episode: {msg}"),
            Error::Format { offset, message } => {
                write!(f, "format error at byte {offset}: {message}")
            }
            Error::Config(msg) => write!(f, "invalid config: {msg}"),
            Error::Spec(msg) => write!(f, "invalid scene spec: {msg}"),
            Error::Io(msg) => write!(f, "io error: {msg}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
