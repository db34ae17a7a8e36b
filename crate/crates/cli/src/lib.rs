//! Experiment harness around the `shaftpower` library: data generation,
//! training stages, the full transfer-learning comparison, and its tables.

pub mod commands;
pub mod config;
pub mod experiment;
pub mod pipeline;
pub mod tables;

pub use config::ExperimentConfig;
pub use experiment::{run_full_experiment, Arm, ExperimentOutcome, RunRecord};
pub use pipeline::{select_base_vessel, StageError};
