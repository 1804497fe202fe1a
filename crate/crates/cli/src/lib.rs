//! Command-line plumbing for moelab: run configuration, the checkpoint
//! container, metrics files, reports and the subcommands built on them.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod lock;
pub mod metrics;
pub mod report;

pub use commands::{AnalyzeKind, Session};
pub use config::{Overrides, RunConfig};
pub use error::{CliError, Result};
