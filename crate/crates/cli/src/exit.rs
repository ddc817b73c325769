//! Process exit codes.
//!
//! | code | meaning |
//! |------|---------|
//! | 0 | success |
//! | 1 | configuration or argument error |
//! | 2 | data error (missing, unreadable or malformed input) |
//! | 3 | numeric abort (non-finite loss or gradient) |
//! | 4 | checkpoint unreadable or mismatched with the configuration |
//! | 5 | verification failure |

use std::fmt;

use cotseg::Error;

pub const CONFIG: i32 = 1;
pub const DATA: i32 = 2;
pub const NUMERIC: i32 = 3;
pub const CHECKPOINT: i32 = 4;
pub const VERIFY: i32 = 5;

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn new(code: i32, message: impl Into<String>) -> Self {
        CliError {
            code,
            message: message.into(),
        }
    }

    pub fn config(message: impl Into<String>) -> Self {
        Self::new(CONFIG, message)
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self::new(DATA, message)
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Parameter(_) | Error::Contract(_) => CONFIG,
            Error::Numeric(_) => NUMERIC,
            Error::Checkpoint(_) => CHECKPOINT,
            Error::Dimension(_) | Error::Validation(_) | Error::Nifti(_) | Error::Io { .. } => DATA,
        };
        CliError::new(code, e.to_string())
    }
}
