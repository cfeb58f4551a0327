//! Command-line workflows for Group-Net: data ingestion, configuration,
//! training, evaluation, benchmarking and the binary model format.

pub mod commands;
pub mod config;
pub mod data;
pub mod error;
pub mod metrics;
pub mod modelfile;
pub mod train;

pub use commands::{execute, run, Cli, Command};
pub use error::{CliError, Result};
