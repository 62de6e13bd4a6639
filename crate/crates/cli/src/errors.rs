//! Exit-code policy.
//!
//! The process exit code is a stable contract: 0 success, 2 configuration
//! error, 3 I/O error, 4 numerical failure. Library errors are mapped by
//! what the caller can do about them; anything wrong with user-provided
//! parameters is a 2, anything wrong with files is a 3, and anything that
//! went numerically sideways during a run is a 4.

use std::fmt;
use std::path::Path;

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_CONFIG,
            message: message.into(),
        }
    }

    pub fn io(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_IO,
            message: message.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<evtgan::Error> for CliError {
    fn from(err: evtgan::Error) -> Self {
        use evtgan::Error;
        let code = match &err {
            Error::InvalidParams(_) | Error::Domain(_) | Error::DimensionMismatch { .. } => {
                EXIT_CONFIG
            }
            // Bare JSON errors only arise here from reading data files;
            // config files are parsed through `config::parse_file`, which
            // assigns the config exit code itself.
            Error::Io(_) | Error::CsvFormat { .. } | Error::Json(_) => EXIT_IO,
            Error::Fit(_)
            | Error::Degenerate(_)
            | Error::NonFinite(_)
            | Error::StaleTape
            | Error::Diverged { .. } => EXIT_NUMERIC,
        };
        Self {
            code,
            message: err.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(err: std::io::Error) -> Self {
        Self {
            code: EXIT_IO,
            message: err.to_string(),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Annotates an I/O-ish error with the path it concerns.
pub fn with_path<T>(result: evtgan::Result<T>, path: &Path) -> CliResult<T> {
    result.map_err(|e| {
        let mut err = CliError::from(e);
        err.message = format!("{}: {}", path.display(), err.message);
        err
    })
}
