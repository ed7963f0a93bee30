//! Implementation behind the `densify` binary. `main` is a thin
//! argument-parsing shell so integration tests can drive the same code paths
//! in process.
//!
//! Output conventions, shared by every subcommand:
//! machine-readable results are JSON lines on stdout, human-readable logs and
//! reports go to stderr. Commands that produce artifacts also write a
//! [`manifest::RunManifest`] next to their primary output.

pub mod args;
pub mod commands;
pub mod error;
pub mod manifest;

pub use args::{Cli, Command};
pub use error::CliError;
