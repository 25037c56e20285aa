use std::fmt;
use std::process::ExitCode;

use dipricer::Error;

/// Exit status 2: bad configuration or input.
pub const EXIT_CONFIG: u8 = 2;
/// Exit status 3: a solver found no finite solution.
pub const EXIT_DIVERGENCE: u8 = 3;
/// Exit status 4: filesystem errors.
pub const EXIT_IO: u8 = 4;

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn config(msg: impl Into<String>) -> Self {
        Failure { code: EXIT_CONFIG, message: msg.into() }
    }

    pub fn divergence(msg: impl Into<String>) -> Self {
        Failure { code: EXIT_DIVERGENCE, message: msg.into() }
    }

    pub fn io(context: impl fmt::Display, e: impl fmt::Display) -> Self {
        Failure { code: EXIT_IO, message: format!("{context}: {e}") }
    }

    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(self.code)
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Io(_) => EXIT_IO,
            Error::Divergence(_) | Error::NotConverged { .. } | Error::NoAccepted { .. } | Error::Infeasible { .. } => {
                EXIT_DIVERGENCE
            }
            _ => EXIT_CONFIG,
        };
        Failure { code, message: e.to_string() }
    }
}
