//! Experiment orchestration over `twoscale-core`: TOML configs, the
//! pipeline from ergodic tables to the reduced problem, convergence sweeps
//! and their CSV output.

pub mod commands;
pub mod config;
pub mod pipeline;
pub mod report;

pub use config::ExperimentConfig;
pub use pipeline::Context;
pub use report::{Check, SweepResult};
