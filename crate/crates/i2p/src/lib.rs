//! File formats, dataset construction and experiment drivers around
//! `i2p-core`.

pub mod config;
pub mod dataset;
pub mod error;
pub mod exec;
pub mod extractor;
pub mod formats;
pub mod run;

pub use error::{RunError, RunResult};
