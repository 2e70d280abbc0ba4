use std::fmt;

use mfa_core::MfaError;

pub const EXIT_LOCAL_ONLY: i32 = 2;
pub const EXIT_NOT_IDENTIFIABLE: i32 = 3;
pub const EXIT_USAGE: i32 = 64;
pub const EXIT_DATA: i32 = 65;
pub const EXIT_NUMERIC: i32 = 70;

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self { code: EXIT_USAGE, message: message.into() }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self { code: EXIT_DATA, message: message.into() }
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self { code: EXIT_NUMERIC, message: message.into() }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

/// Errors from reading inputs.
pub fn input(e: MfaError) -> CliError {
    match e {
        MfaError::InvalidStructure(_) | MfaError::Domain(_) | MfaError::ConstraintViolation { .. } => {
            CliError::usage(e.to_string())
        }
        _ => CliError::data(e.to_string()),
    }
}

/// Errors from the numerical work itself.
pub fn numeric(e: MfaError) -> CliError {
    match e {
        MfaError::InvalidStructure(_) | MfaError::Domain(_) | MfaError::ConstraintViolation { .. } => {
            CliError::usage(e.to_string())
        }
        MfaError::DimensionMismatch(_) | MfaError::EmptyData(_) | MfaError::Parse(_) | MfaError::Json(_) => {
            CliError::data(e.to_string())
        }
        _ => CliError::internal(e.to_string()),
    }
}
