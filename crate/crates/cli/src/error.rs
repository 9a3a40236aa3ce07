use std::fmt;

use otbe::Error;

/// Bad flags, schema, config or input files.
pub const EXIT_USAGE: i32 = 2;
/// The numeric pipeline failed.
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

    pub fn io(path: &std::path::Path, err: impl fmt::Display) -> Self {
        CliError::usage(format!("{}: {err}", path.display()))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<Error> for CliError {
    fn from(err: Error) -> Self {
        let code = match err.root() {
            Error::InvalidParameter(_) | Error::InvalidConfig(_) | Error::Format(_) | Error::UnknownClass(_) => {
                EXIT_USAGE
            }
            _ => EXIT_NUMERIC,
        };
        CliError {
            code,
            message: err.to_string(),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
