//! Command-line front end: CSV ingestion, run manifests and the
//! `simulate`, `estimate`, `select`, `backtest` and `scree` commands.

pub mod commands;
pub mod error;
pub mod io;
pub mod manifest;

pub use commands::{run, Cli, Command, Summary};
pub use error::{CliError, CliResult};
