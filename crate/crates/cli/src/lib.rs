//! Library half of the `sdkit` command-line tool. Each subcommand is a plain
//! function so the behavior is testable without spawning the binary.

pub mod calspec;
pub mod commands;
pub mod error;
pub mod experiment;
pub mod loader;
pub mod output;
pub mod report;
pub mod svg;

pub use error::CliError;
