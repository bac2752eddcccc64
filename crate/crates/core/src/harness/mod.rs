//! Experiment harness: configuration, file formats, the pipeline commands
//! and the run manifest.

pub mod config;
pub mod experiment;
pub mod io;
pub mod manifest;

pub use config::{ExperimentConfig, PlanCost, Preset};
pub use experiment::{run, run_pipeline, Command, Outcome};
pub use manifest::RunManifest;
