//! Run manifest: resolved configuration, seed derivations, per-cycle
//! artifacts, and wall-clock timings. Together with the config it pins
//! everything needed to re-run bit-identically (timings aside).

use std::path::Path;

use serde::Serialize;

use crate::error::Result;

use super::config::ExperimentConfig;

#[derive(Debug, Clone, Serialize)]
pub struct SeedRecord {
    pub purpose: String,
    pub value: u64,
}

#[derive(Debug, Clone, Serialize, Default)]
pub struct CycleRecord {
    pub cycle: usize,
    pub artifacts: Vec<String>,
    pub rmse_forecast: f64,
    pub rmse_analysis: f64,
    pub acceptance_rate: Option<f64>,
    pub selected_n_c: Option<usize>,
    pub forecast_secs: f64,
    pub analysis_secs: f64,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub package_version: String,
    pub master_seed: u64,
    pub resolved_config: ExperimentConfig,
    pub seeds: Vec<SeedRecord>,
    pub cycles: Vec<CycleRecord>,
    pub artifacts: Vec<String>,
    pub total_secs: f64,
    /// Cycle index and stage of the failure that aborted the run, if any.
    pub aborted: Option<(usize, String)>,
}

impl RunManifest {
    pub fn new(resolved_config: ExperimentConfig) -> Self {
        Self {
            package_version: env!("CARGO_PKG_VERSION").to_string(),
            master_seed: resolved_config.experiment.seed,
            resolved_config,
            seeds: Vec::new(),
            cycles: Vec::new(),
            artifacts: Vec::new(),
            total_secs: 0.0,
            aborted: None,
        }
    }

    pub fn record_seed(&mut self, purpose: impl Into<String>, value: u64) {
        self.seeds.push(SeedRecord {
            purpose: purpose.into(),
            value,
        });
    }

    pub fn record_artifact(&mut self, path: impl Into<String>) {
        self.artifacts.push(path.into());
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let file = std::fs::File::create(dir.join("manifest.json"))?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(file), self)?;
        Ok(())
    }
}
