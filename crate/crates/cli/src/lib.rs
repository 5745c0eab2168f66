//! Experiment orchestration for memlab: configs, presets, run directories,
//! reports and plots.

pub mod config;
pub mod pipeline;
pub mod plot;
pub mod report;
pub mod rundir;

pub use config::ExperimentConfig;
pub use pipeline::{run, run_with, Lab};
pub use rundir::{Manifest, RunDir, Status};
