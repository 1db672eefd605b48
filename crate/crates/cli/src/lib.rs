//! Library side of the `qskd` command: configuration handling and one
//! function per subcommand.

pub mod commands;
pub mod config;
pub mod error;

pub use config::RunConfig;
pub use error::{CliError, CliResult};
