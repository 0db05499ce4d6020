//! Library behind the `datprl` binary: configuration, commands and the
//! gradient-check suite.

pub mod commands;
pub mod config;
pub mod gradcheck;

pub use config::RunConfig;
