//! Process exit codes and the mapping from library errors onto them.

use std::fmt;

use freqchain_core::Error as CoreError;

pub const USAGE: u8 = 2;
pub const CONFIG: u8 = 3;

/// An error that carries its own exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for Failure {}

pub fn usage(message: impl Into<String>) -> anyhow::Error {
    Failure {
        code: USAGE,
        message: message.into(),
    }
    .into()
}

pub fn config(message: impl Into<String>) -> anyhow::Error {
    Failure {
        code: CONFIG,
        message: message.into(),
    }
    .into()
}

/// Configuration problems exit with 3; everything else, including malformed
/// files and inputs, exits with 2.
pub fn code_for(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(f) = cause.downcast_ref::<Failure>() {
            return f.code;
        }
        if let Some(e) = cause.downcast_ref::<CoreError>() {
            return match e {
                CoreError::InvalidConfig(_) => CONFIG,
                _ => USAGE,
            };
        }
    }
    USAGE
}
