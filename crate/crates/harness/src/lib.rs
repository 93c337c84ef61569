//! Configuration, orchestration and output for steady-state, sweep,
//! comparison and trajectory runs of the feedback-cooling model.

pub mod commands;
pub mod config;

pub use config::{parse_config, ConfigError, RunConfig};
