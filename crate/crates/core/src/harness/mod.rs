//! Datasets, transports, configuration and experiment driving.

pub mod dataset;
pub mod experiment;
pub mod report;
pub mod transport;

pub use dataset::{gen_dataset, DatasetSpec};
pub use experiment::{run_experiment, run_sweep, ExperimentConfig, ExperimentOutput};
