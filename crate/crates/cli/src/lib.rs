//! Command-line driver: configuration, the run-directory layout and the
//! gen-data / train / infer / eval / report commands.

pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;
pub mod manifest;

pub use config::RunConfig;
pub use dataset::Layout;
pub use error::{CliError, CliResult};
