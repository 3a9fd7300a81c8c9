//! Command-line driver: experiment configuration, the multi-run protocol,
//! result aggregation and the estimator checks.

pub mod cli;
pub mod commands;
pub mod config;
pub mod experiment;
pub mod report;
