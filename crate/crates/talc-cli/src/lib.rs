//! Library surface of the command-line tool: run-configuration handling,
//! subcommand implementations, and the end-to-end desk-scale comparison.

pub mod commands;
pub mod config;
pub mod desk;
