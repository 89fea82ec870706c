//! Library side of the `skam` command-line tool: experiment configs,
//! training runs, evaluation tables and transform benchmarks.

pub mod bench;
pub mod config;
pub mod experiment;
