//! Command implementations behind the `sqlprompt` binary.

pub mod commands;
pub mod config;
