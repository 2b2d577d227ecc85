//! Command implementations behind the `tdpcr` binary.

pub mod commands;
pub mod config;
pub mod image;
pub mod viz;

use tdpcr_core::Error;

/// Process exit status for a failed command.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Argument(_) => 2,
        Error::Data(_) | Error::Io { .. } => 3,
        Error::Numeric(_) => 4,
        Error::Shape(_) => 1,
    }
}
