//! Error type carrying the process exit code.

use std::fmt;

use stabletrain_core::Error;

pub const EXIT_VALIDATION: u8 = 2;
pub const EXIT_DATA: u8 = 3;
pub const EXIT_INTERNAL: u8 = 4;

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn validation(msg: impl Into<String>) -> Self {
        Self { code: EXIT_VALIDATION, message: msg.into() }
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Self { code: EXIT_DATA, message: msg.into() }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) => EXIT_VALIDATION,
            Error::Data(_) | Error::Parse { .. } | Error::Unsupported(_) | Error::Io { .. } | Error::Json(_) => {
                EXIT_DATA
            }
            Error::Tensor(_) => EXIT_INTERNAL,
        };
        Self { code, message: e.to_string() }
    }
}

impl From<csv::Error> for Failure {
    fn from(e: csv::Error) -> Self {
        Self { code: EXIT_DATA, message: format!("csv: {e}") }
    }
}
