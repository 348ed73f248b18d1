use std::fmt;
use std::path::Path;

/// An error with a short machine-readable code, printed as
/// `error: <code>: <message>`.
#[derive(Debug)]
pub struct CliError {
    pub code: &'static str,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        CliError {
            code: "usage",
            message: message.into(),
        }
    }

    pub fn config(message: impl Into<String>) -> Self {
        CliError {
            code: "config",
            message: message.into(),
        }
    }

    pub fn io(path: &Path, err: impl fmt::Display) -> Self {
        CliError {
            code: "io",
            message: format!("{}: {err}", path.display()),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        // keep the report on one line
        let msg = self.message.replace('\n', " ");
        write!(f, "error: {}: {}", self.code, msg.trim())
    }
}

impl From<dualcassi::Error> for CliError {
    fn from(e: dualcassi::Error) -> Self {
        CliError {
            code: e.code(),
            message: e.to_string(),
        }
    }
}

/// Attaches a path to errors from file operations.
pub trait WithPath<T> {
    fn at(self, path: &Path) -> Result<T, CliError>;
}

impl<T> WithPath<T> for dualcassi::Result<T> {
    fn at(self, path: &Path) -> Result<T, CliError> {
        self.map_err(|e| {
            let mut c = CliError::from(e);
            c.message = format!("{}: {}", path.display(), c.message);
            c
        })
    }
}
