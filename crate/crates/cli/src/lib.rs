//! Command implementations behind the `dynframe` binary.

pub mod check;
pub mod commands;
pub mod config;
pub mod error;

pub use config::RunConfig;
pub use error::CliError;
