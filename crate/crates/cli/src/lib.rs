//! File formats, parallel fan-out, and the subcommand implementations
//! behind the `capforge` binary. Everything numeric lives in
//! `capforge-core`; this crate only moves bytes and schedules work.

pub mod bench;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod threads;
