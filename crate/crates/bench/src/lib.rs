//! Benchmarks, error reports, decode simulation and snapshot tools for the
//! quantized key/value cache.
//!
//! Every subcommand of the `qcache-bench` binary is a library function in
//! [`commands`] returning structured rows, so tests can check results
//! without parsing output.

pub mod cli;
pub mod commands;
pub mod data;
mod error;
pub mod presets;
pub mod report;

pub use error::{BenchError, Result};
