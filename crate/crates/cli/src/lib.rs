//! Run orchestration for the `fvsim` binary.

pub mod args;
pub mod commands;
pub mod demos;
pub mod output;

/// Outcome of a subcommand that ran to completion.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Status {
    Ok,
    ValidationFailed,
    DiagnosticFailed,
}

impl Status {
    pub fn code(self) -> i32 {
        match self {
            Self::Ok => 0,
            Self::ValidationFailed => 2,
            Self::DiagnosticFailed => 3,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Self::Ok => "ok",
            Self::ValidationFailed => "validation_failed",
            Self::DiagnosticFailed => "diagnostic_failed",
        }
    }
}

/// Exit code for malformed configs and failed runs.
pub const EXIT_ERROR: i32 = 1;
