//! CLI plumbing for the blockperm pipeline: CSV schemas, run manifests,
//! simulation configs, and the subcommand implementations.

pub mod commands;
pub mod config;
pub mod csvio;
pub mod manifest;
pub mod parallel;
