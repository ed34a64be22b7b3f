//! Command-line layer over `pidiff-core`: file formats, checkpoint
//! directories, run configuration, dataset folders and the subcommands.

pub mod ckpt;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod io;

pub use error::{CliError, CliResult};
