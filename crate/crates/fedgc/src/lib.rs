//! Experiment runner, config and file formats around `fedgc-core`.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod formats;
pub mod metrics;
pub mod runner;

pub use error::{ConfigIssue, Error, Result};
