//! Library surface of the harness, exposed so integration tests can drive
//! the command implementations directly.

pub mod checkpoint;
pub mod commands;
pub mod config;
