use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("format error in {field}: {detail}")]
    Format { field: &'static str, detail: String },

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("operator too large: {size} columns exceeds the cap of {cap}")]
    TooLarge { size: usize, cap: usize },

    #[error("unknown name: {0}")]
    UnknownName(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }

    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn format(field: &'static str, detail: impl Into<String>) -> Self {
        Error::Format {
            field,
            detail: detail.into(),
        }
    }

    /// Short machine-readable code for command-line error reporting.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Parameter(_) => "parameter",
            Error::Dimension { .. } => "dimension",
            Error::Format { .. } => "format",
            Error::UndefinedMetric(_) => "metric",
            Error::TooLarge { .. } => "too-large",
            Error::UnknownName(_) => "unknown-name",
            Error::Io(_) => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
