//! File formats, checkpoints and run drivers for `unihead-core`.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod report;
pub mod run;
pub mod svg;

pub use error::{CliError, Result};
