//! Command line pipeline and read-only HTTP service for PCB risk models.

pub mod config;
pub mod error;
pub mod run;
pub mod service;

pub use config::RunConfig;
pub use error::{exit, CliError};
