//! Command-line front end: fixtures, distillation, training, evaluation,
//! prediction and shot-scale editing.

pub mod app;
pub mod config;
pub mod edit;

pub use app::{run, Cli, CliError};
pub use config::CliConfig;
