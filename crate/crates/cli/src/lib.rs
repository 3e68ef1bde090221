//! Command-line surface for hard-attention-gated models: configuration,
//! training and evaluation runs, checkpoints, gradient checks and gate
//! statistics.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod run;

pub use config::{Overrides, RunConfig};
pub use error::{CliResult, Failure};
