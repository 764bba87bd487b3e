//! Mapping of failures onto process exit codes.

use std::fmt;

use asap_core::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_IO: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    pub fn io(message: impl Into<String>) -> Self {
        CliError {
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

impl std::error::Error for CliError {}

/// Bad flags and configurations are usage errors; anything wrong with files
/// on disk (missing, unreadable, malformed, corrupted or incompatible) is an
/// I/O error; non-finite training losses are numeric failures.
impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_) | Error::Argument(_) | Error::SizeGuard { .. } => EXIT_USAGE,
            Error::Numeric(_) => EXIT_NUMERIC,
            Error::Io { .. }
            | Error::Parse { .. }
            | Error::Validation(_)
            | Error::Format(_)
            | Error::Incompatible(_)
            | Error::Integrity(_) => EXIT_IO,
            Error::Index { .. } | Error::Shape(_) | Error::Contract(_) => EXIT_IO,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::io(format!("csv: {e}"))
    }
}

pub type CliResult<T> = Result<T, CliError>;
