//! File formats, ingestion, configuration and the command line around
//! [`securelink_core`].

pub mod artifacts;
pub mod commands;
pub mod config;
pub mod error;
pub mod ingest;
pub mod runtime;

pub use error::{CliError, Result};
