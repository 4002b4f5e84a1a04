use std::io;

use thiserror::Error;

/// Errors raised across the distillation toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("validation error: {0}")]
    Validation(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("state error: {0}")]
    State(String),

    #[error("calibration error: {0}")]
    Calibration(String),

    #[error("degenerate subspace: requested {requested} dimensions but the data has rank {rank}")]
    DegenerateSubspace { requested: usize, rank: usize },

    #[error("format error: {0}")]
    Format(String),

    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
}

impl Error {
    /// Process exit code for this error class: 2 validation, 3 numerical, 4 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Validation(_) | Error::State(_) => 2,
            Error::Numerical(_) | Error::Calibration(_) | Error::DegenerateSubspace { .. } => 3,
            Error::Format(_) | Error::Io(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

macro_rules! ensure {
    ($cond:expr, $($arg:tt)+) => {
        if !($cond) {
            return Err($crate::error::Error::Validation(format!($($arg)+)));
        }
    };
}
pub(crate) use ensure;
