//! Experiment configuration, orchestration and reporting for dvisr.

pub mod config;
pub mod experiment;
pub mod profiles;
pub mod scaling;
pub mod stats;
pub mod tables;

use std::path::Path;

pub use config::{ConfigError, ExperimentSpec};
pub use experiment::{run_experiment, HarnessError, RunReport};
pub use scaling::{run_scaling_sweep, ScalingReport};
pub use tables::compare_tables;

/// Resolves a built-in profile name or a path to a TOML spec.
pub fn load_spec(name_or_path: &str) -> Result<ExperimentSpec, ConfigError> {
    match profiles::profile(name_or_path) {
        Some(spec) => Ok(spec),
        None => ExperimentSpec::load(Path::new(name_or_path)),
    }
}
