//! Experiment configurations, drivers and exports.

pub mod config;
pub mod convergence;
pub mod export;
pub mod presets;
pub mod run;
pub mod validate;

pub use config::{Experiment, ExperimentConfig};
pub use convergence::{convergence_study, ConvergenceTable};
pub use run::{run_test1, run_test2, ControlMode, ExperimentResult};
pub use validate::{validate, ValidationReport};
