//! File formats, run configuration and the command implementations behind
//! the `mgg` binary.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod fsio;
pub mod manifest;
pub mod pgm;
pub mod tensor_io;

pub use commands::Session;
pub use config::RunConfig;
pub use error::{CliError, CliResult, Kind};
