//! Library side of the benchmark CLI: configuration loading, experiment
//! drivers, and estimates-file summaries. The binary in `main.rs` is a thin
//! argument-parsing shell over these functions.

pub mod config;
pub mod run;
pub mod summary;
