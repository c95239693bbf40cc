//! Command-line driver around `lace_core`: training runs with replayable
//! manifests, gradient checks, embedding export and cluster scoring.
//!
//! Exit codes: 1 output failure, 2 config error, 3 data error, 4 numerical
//! failure, 5 gradient mismatch.

pub mod commands;
pub mod config;
pub mod error;
pub mod pipeline;

pub use commands::{run, Cli};
pub use config::RunConfig;
pub use error::{CliError, CliResult};
