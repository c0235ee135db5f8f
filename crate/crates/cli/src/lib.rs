//! Configuration, preflight checks, subcommands and artifact formats of the
//! `qholo` command-line tool.

pub mod commands;
pub mod config;
pub mod error;
pub mod output;
pub mod units;

pub use config::{LoadedConfig, RunConfig};
pub use error::CliError;
