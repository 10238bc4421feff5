//! Library surface of the `orchestra` binary: configuration resolution,
//! the one-shot commands, and the HTTP service. The binary in `main.rs`
//! is a thin clap dispatcher over these modules; integration tests drive
//! them in-process.

pub mod commands;
pub mod config;
pub mod serve;
