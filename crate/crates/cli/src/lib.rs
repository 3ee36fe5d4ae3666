//! Library surface of the `voctl` binary: config parsing, trajectory file
//! I/O, and the command implementations, kept in a lib so integration tests
//! can drive them without spawning processes.

pub mod commands;
pub mod config;
pub mod tum;
