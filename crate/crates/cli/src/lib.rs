//! Config-driven experiment runner: dataset generation, training, linear
//! probing, diagnostics and method comparison, each writing reports stamped
//! with the config hash and master seed.

pub mod args;
pub mod commands;
pub mod config;
pub mod error;
pub mod output;

pub use args::{run_from_args, Cli};
pub use commands::{run, Command, Diagnostic, RunOptions};
pub use config::ExperimentConfig;
pub use error::CliError;
