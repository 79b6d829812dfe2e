//! Filesystem and experiment layer over `diffseg-core`: folder datasets and
//! raw volumes, checkpoints, TOML experiment configs, the pretrain ->
//! co-train -> evaluate pipeline with its sweep over seeds and labeled
//! fractions, and CSV/Markdown/PNG reports.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod harness;
pub mod monitor;
pub mod record;
pub mod report;
pub mod stats;

pub use config::ExperimentConfig;
pub use error::{Error, Result};
pub use harness::{run_experiment, run_supervised_baseline, Harness};
pub use record::RunRecord;

/// Overrides the configured output root when set.
pub const OUTPUT_ENV: &str = "DIFFSEG_OUT";
