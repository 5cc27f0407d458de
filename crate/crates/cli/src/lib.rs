//! File formats, run configuration and subcommands of the `cleargcd` tool.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod dataset_io;
pub mod error;

pub use config::RunConfig;
pub use error::CliError;
