//! Everything around the ToFe math: synthetic data, checkpoints, run
//! configuration, evaluation, diagnostics and the `tofe` command line.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod fsutil;
pub mod report;

pub use checkpoint::Checkpoint;
pub use config::RunConfig;
pub use dataset::{Dataset, DatasetSpec};
pub use error::{HarnessError, Result};
pub use report::RunReport;
