//! Command-line front end for the conditional density engine.

pub mod compare;
pub mod config;
pub mod error;
pub mod ingest;
pub mod manifest;
pub mod run;
pub mod selftest;

pub use compare::{compare_runs, CompareReport};
pub use config::{load_config, parse_config, ScenarioConfig, OUTPUT_DIR_ENV};
pub use error::{CliError, Result};
pub use manifest::RunManifest;
pub use run::run_scenario;
