//! Command line and HTTP front end for [`miniyolo`].

pub mod cli;
pub mod commands;
pub mod error;
pub mod payload;
pub mod server;

pub use error::{CliError, CliResult};
