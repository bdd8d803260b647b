//! Library side of the `streamdec` command. Every subcommand is a plain
//! function returning a [`CliError`] whose kind fixes the exit status:
//! 0 ok, 1 other failure, 2 configuration, 3 missing prerequisite,
//! 4 incompatible artifacts, 5 corrupt input.

pub mod commands;
pub mod error;

pub use commands::*;
pub use error::{CliError, ExitKind, Result};
