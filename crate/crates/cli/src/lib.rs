//! Configuration, experiments and output formats behind the `fedpriv` binary.

pub mod config;
pub mod error;
pub mod experiments;
pub mod metrics;
pub mod tables;

pub use config::ExperimentConfig;
pub use error::CliError;
