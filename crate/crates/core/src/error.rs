use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("point is behind the camera (z = {z})")]
    BehindCamera { z: f64 },

    #[error("size mismatch in {what}: expected {expected}, got {actual}")]
    SizeMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("invalid spec: {0}")]
    InvalidSpec(String),

    #[error("parse error in {context}: {message}")]
    Parse { context: String, message: String },

    #[error("unknown keypoint name `{name}` in {context}")]
    UnknownKeypointName { name: String, context: String },

    #[error("failed to load pose prior: {0}")]
    PriorLoad(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Coarse failure category, used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Parse,
    Numeric,
    Io,
}

impl ErrorClass {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorClass::Config => 2,
            ErrorClass::Parse => 3,
            ErrorClass::Numeric => 4,
            ErrorClass::Io => 5,
        }
    }
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) | Error::InvalidSpec(_) => ErrorClass::Config,
            Error::Parse { .. } | Error::UnknownKeypointName { .. } | Error::PriorLoad(_) | Error::SizeMismatch { .. } => {
                ErrorClass::Parse
            }
            Error::DegenerateInput(_) | Error::BehindCamera { .. } | Error::NonFinite(_) => ErrorClass::Numeric,
            Error::Io { .. } => ErrorClass::Io,
        }
    }

    pub(crate) fn parse(context: impl Into<String>, message: impl std::fmt::Display) -> Self {
        Error::Parse {
            context: context.into(),
            message: message.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn size(what: &'static str, expected: usize, actual: usize) -> Self {
        Error::SizeMismatch {
            what,
            expected,
            actual,
        }
    }
}
