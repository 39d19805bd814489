use std::io;

use thiserror::Error;

/// Errors produced by the core library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("import error: {0}")]
    Import(String),
    #[error("data error at element {index}: {message}")]
    Data { index: usize, message: String },
    #[error("unsupported container version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("format error: {0}")]
    Format(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("pixel ({x}, {y}) outside {width}x{height} image")]
    Bounds {
        x: i64,
        y: i64,
        width: usize,
        height: usize,
    },
    #[error("state error: {0}")]
    State(String),
    #[error("argument error: {0}")]
    Arg(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}

pub(crate) fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}
