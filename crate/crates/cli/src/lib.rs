//! Command-line driver: configuration, the shared experiment pipeline and
//! the subcommands.

pub mod commands;
pub mod config;
pub mod pipeline;
