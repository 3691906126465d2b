//! Config-driven front end for `lent-core`.

pub mod commands;
pub mod config;
pub mod error;
pub mod setup;

pub use commands::{run, Command};
pub use config::RunConfig;
pub use error::CliError;
