//! Crate-wide error type. Shape mismatches on the hot path are programmer
//! errors and panic via `assert!`; everything user-facing returns [`Error`].

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training error: {0}")]
    Training(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    /// Stable machine-parsable code, printed by the CLI on its single error line.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Config(_) => "E_CONFIG",
            Error::Domain(_) => "E_DOMAIN",
            Error::Data(_) => "E_DATA",
            Error::Shape(_) => "E_SHAPE",
            Error::Checkpoint(_) => "E_CHECKPOINT",
            Error::Training(_) => "E_TRAINING",
            Error::Io(_) => "E_IO",
            Error::Image(_) => "E_IMAGE",
        }
    }

    /// Process exit code used by the CLI (documented in the README).
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Domain(_) => 2,
            Error::Data(_) | Error::Image(_) => 3,
            Error::Training(_) => 4,
            Error::Checkpoint(_) | Error::Shape(_) => 5,
            Error::Io(_) => 6,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
