//! Config-driven experiments on top of `inkwm`.

pub mod artifacts;
pub mod commands;
pub mod config;
pub mod error;
pub mod pipeline;
pub mod report;

pub use config::{ExperimentConfig, Overrides};
pub use error::{CliError, Phase};
