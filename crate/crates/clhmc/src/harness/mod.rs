//! Experiment orchestration: configuration files, twin-experiment setup, the
//! cycle loop, artifact persistence, seeding, and the command-line interface.

pub mod cli;
pub mod config;
pub mod manifest;
pub mod static1d;
pub mod twin;

pub use cli::cli_entry;
pub use config::ExperimentConfig;
pub use manifest::RunManifest;
pub use static1d::run_static_1d;
pub use twin::run_twin_experiment;
