//! Experiment orchestration: configuration, data, checkpoints, metrics and figures.

pub mod checkpoint;
pub mod config;
pub mod datasets;
pub mod figures;
pub mod run;
