//! Library side of the `comp-attn` command: experiment configs, the
//! training driver with its manifest, analysis and verification commands.

pub mod analyze;
pub mod config;
pub mod error;
pub mod train;
pub mod verify;

pub use config::{ExperimentConfig, OUTPUT_ENV};
pub use error::CliError;
