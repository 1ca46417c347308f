//! Process-level error type carrying the exit-code contract: 1 for failures
//! discovered in otherwise well-formed data, 2 for usage and configuration
//! problems. Success is 0; episode-level errors inside a run are data, not
//! process failures.

use std::fmt;

#[derive(Debug)]
pub enum CliError {
    /// Bad invocation, unreadable or invalid configuration. Exit 2.
    Usage(String),
    /// Valid invocation that failed on the data. Exit 1.
    Data(String),
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> CliError {
        CliError::Usage(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> CliError {
        CliError::Data(msg.into())
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(msg) | CliError::Data(msg) => f.write_str(msg),
        }
    }
}

impl std::error::Error for CliError {}
