//! File formats, run configuration and the command-line driver around
//! `hyperlora-core`.
//!
//! A run is a chain of directories: `gen-data` writes a dataset, `train`
//! reads it and writes a checkpoint with its metric log, and `eval`,
//! `dca` and `analyze` turn checkpoints and score files into plot-ready
//! tables. Every output directory carries the effective `config.json`.

pub mod checkpoint;
pub mod cli;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;
pub mod scores;
pub mod volume;

pub use error::{AppError, AppResult, FormatError};
