//! Library side of the `flowconvert` command: run configuration, stage training,
//! batch conversion, evaluation and provenance checks.

pub mod commands;
pub mod config;
pub mod models;

use flowconvert_core::Error;

pub use config::RunConfig;

/// Process exit status for an error: 2 configuration or input, 3 missing
/// dependency or ordering, 4 numeric or training failure, 1 anything else.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_)
        | Error::Contract(_)
        | Error::Lookup(_)
        | Error::EmptyInput(_)
        | Error::ModeUnsupported { .. } => 2,
        Error::Ordering(_) => 3,
        Error::Numeric(_) | Error::Training(_) => 4,
        Error::Format { .. } | Error::Io { .. } | Error::Json(_) => 1,
    }
}
