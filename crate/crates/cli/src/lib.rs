//! Command-line driver for `gpml-core`: CSV ingestion, covariate
//! transforms and the `gpml` subcommands.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
pub mod error;
pub mod io;
pub mod transform;

pub use commands::{execute, Cli};
pub use error::{CliError, EXIT_RUNTIME, EXIT_USAGE};
