//! Batch driver for bergman-lab experiments: JSON configs in, JSON reports and CSV ladders out.
//!
//! Exit codes: `0` every assertion held, `1` an assertion failed (or a flagged event under
//! `--strict`), `2` the configuration was rejected, `3` a numerical failure.

pub mod config;
pub mod runner;

pub use config::{ExperimentConfig, Kind};
pub use runner::{compute, run, Report, RunError, RunOptions};
