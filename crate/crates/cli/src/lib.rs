//! Library half of the `attnfd` command-line tool.

pub mod commands;
pub mod config;
pub mod viz;

use attnfd::Error;

/// Stable exit code and category name for an error.
pub fn exit_code(e: &Error) -> (i32, &'static str) {
    match e {
        Error::Config(_) => (3, "config"),
        Error::Io { .. } => (4, "io"),
        Error::Checkpoint(_) => (5, "checkpoint"),
        Error::Parse { .. } | Error::Label { .. } | Error::Consistency(_) => (6, "data"),
        Error::Dimension(_) | Error::Geometry(_) => (7, "shape"),
        Error::Diverged { .. } | Error::NonFinite { .. } => (8, "diverged"),
        Error::Contract(_) | Error::Undefined(_) => (9, "internal"),
    }
}
