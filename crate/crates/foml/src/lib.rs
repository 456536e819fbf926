//! Experiment runner for fully online meta-learning: configuration files,
//! the FOMLDS dataset format, checkpoints and the run loop behind the `foml`
//! command.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod runner;

pub use config::ExperimentConfig;
pub use foml_core;
