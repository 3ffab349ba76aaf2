//! File formats, configuration and the `cscr` command-line tool built on `cscr-core`.

pub mod cli;
pub mod config;
pub mod error;
pub mod formats;
pub mod pipeline;

pub use error::{CliError, Result};
