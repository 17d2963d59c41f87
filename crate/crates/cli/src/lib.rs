//! File formats, configuration, training driver and command-line front end
//! for `msa-core`.

pub mod bench;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod evaluate;
pub mod features;
pub mod jsonl;
pub mod train;

pub use error::{CliError, Result};
