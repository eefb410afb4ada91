//! Command-line harness around the `gradlibra` library: dataset generation,
//! training, evaluation, loss comparisons and modulating-factor sweeps.
//!
//! Every command reads an [`ExperimentConfig`] (JSON, flags win), writes
//! plain CSV / JSON / JSONL under the output directory and records the fully
//! resolved config in `manifest.json`. Outputs depend only on the config, so
//! re-running a manifest reproduces them byte for byte.

pub mod commands;
pub mod config;
pub mod error;
pub mod pool;

pub use config::{DatasetSource, ExperimentConfig, ModelConfig, Overrides, SweepGrid};
pub use error::{exit, CliError, Result};

/// The guide's CLI chapter, compiled so its snippets run as doctests.
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/cli.md")]
pub mod guide {}
