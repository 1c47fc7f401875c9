//! Experiment configuration: TOML (or JSON) files validated against the
//! schema below; unknown keys are rejected. Missing tuning sections resolve
//! to the per-experiment defaults listed in the README.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filters::{ChainSettings, FilterKind, GmmSelectionSettings, InitPolicy, PriorCovariance};
use crate::gmm::EmSettings;
use crate::hmc::{Integrator, TrajectoryParams};
use crate::qg::QgParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "qg")]
    Qg,
    #[serde(rename = "static_1d")]
    Static1d,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObservationKind {
    Linear,
    WindMagnitude,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    pub model: ModelKind,
    pub n_ens: usize,
    #[serde(default)]
    pub cycles: usize,
    pub seed: u64,
    pub output_dir: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QgSection {
    pub nx: usize,
    pub ny: usize,
    pub spinup_steps: usize,
    pub obs_interval: usize,
    /// Standard deviation of the initial smooth perturbations (truth and
    /// members alike).
    pub init_spread: f64,
    /// Neighbor-averaging passes applied to the white noise.
    pub smoothing_passes: usize,
    pub params: QgParams,
}

impl Default for QgSection {
    fn default() -> Self {
        Self {
            nx: 65,
            ny: 65,
            spinup_steps: 200,
            obs_interval: 10,
            init_spread: 2.0,
            smoothing_passes: 10,
            params: QgParams::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObservationSection {
    pub kind: ObservationKind,
    pub m_obs: usize,
    pub variance: f64,
    /// Redraw the network offset each cycle from (master seed, cycle).
    pub offset_per_cycle: bool,
}

impl Default for ObservationSection {
    fn default() -> Self {
        Self {
            kind: ObservationKind::Linear,
            m_obs: 300,
            variance: 4.0,
            offset_per_cycle: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Static1dSection {
    pub observation: f64,
    pub obs_variance: f64,
    pub n_samples: usize,
    pub grid_points: usize,
    pub hist_bins: usize,
    pub hist_min: f64,
    pub hist_max: f64,
    /// Mixture the prior ensemble is drawn from: (weight, mean, variance)
    /// triples.
    pub truth: Vec<(f64, f64, f64)>,
}

impl Default for Static1dSection {
    fn default() -> Self {
        Self {
            observation: -0.06858,
            obs_variance: 1.2,
            n_samples: 1000,
            grid_points: 2001,
            hist_bins: 61,
            hist_min: -3.5,
            hist_max: 3.5,
            truth: vec![
                (0.2, -2.4, 0.05),
                (0.1, -1.0, 0.07),
                (0.1, 0.0, 0.02),
                (0.3, 1.0, 0.06),
                (0.3, 2.4, 0.1),
            ],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct TrajectorySection {
    pub step_size: Option<f64>,
    pub n_steps: Option<usize>,
    pub integrator: Option<Integrator>,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ChainSection {
    pub burn_in: Option<usize>,
    pub mixing_steps: Option<usize>,
    pub init_policy: Option<InitPolicy>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenkfSection {
    pub localization_radius: Option<f64>,
    pub inflation: f64,
}

impl Default for DenkfSection {
    fn default() -> Self {
        Self {
            localization_radius: Some(12.0),
            inflation: 1.06,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct McSection {
    /// Local variances are averaged with this constant before inversion;
    /// 0 disables blending.
    pub variance_blend: Option<f64>,
    pub scale_step_by_components: Option<bool>,
}

impl Default for McSection {
    fn default() -> Self {
        Self {
            variance_blend: None,
            scale_step_by_components: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterSection {
    pub kind: FilterKind,
    /// Gaussian-prior covariance structure; defaults to the ensemble hybrid
    /// on QG and the plain diagonal on the one-dimensional problem.
    pub prior_covariance: Option<PriorCovariance>,
    pub variance_floor: f64,
    pub trajectory: TrajectorySection,
    pub chain: ChainSection,
    pub gmm: GmmSelectionSettings,
    pub denkf: DenkfSection,
    pub mc: McSection,
}

impl Default for FilterSection {
    fn default() -> Self {
        Self {
            kind: FilterKind::McClHmc,
            prior_covariance: None,
            variance_floor: 1e-8,
            trajectory: TrajectorySection::default(),
            chain: ChainSection::default(),
            gmm: GmmSelectionSettings::default(),
            denkf: DenkfSection::default(),
            mc: McSection::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    /// Write per-cycle forecast/analysis ensembles and truth checkpoints
    /// (required by `clhmc diag`).
    pub save_ensembles: bool,
    /// Emit chi-square QQ data for the forecast ensemble every N cycles;
    /// 0 disables.
    pub qq_interval: usize,
    /// Variable stride of the rank histogram.
    pub rank_stride: usize,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            save_ensembles: false,
            qq_interval: 0,
            rank_stride: 16,
        }
    }
}

/// Top-level experiment configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    #[serde(default)]
    pub qg: QgSection,
    #[serde(default)]
    pub observations: ObservationSection,
    #[serde(default)]
    pub static_1d: Static1dSection,
    #[serde(default)]
    pub filter: FilterSection,
    #[serde(default)]
    pub output: OutputSection,
}

impl ExperimentConfig {
    /// Parse a TOML (default) or JSON (.json) config file.
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: ExperimentConfig = if path.extension().and_then(|e| e.to_str()) == Some("json")
        {
            serde_json::from_str(&text).map_err(|e| Error::config(e.to_string()))?
        } else {
            toml::from_str(&text).map_err(|e| Error::config(e.to_string()))?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.experiment;
        if e.n_ens < 2 {
            return Err(Error::config("experiment.n_ens must be >= 2"));
        }
        match e.model {
            ModelKind::Qg => {
                if self.qg.nx < 5 || self.qg.ny < 5 {
                    return Err(Error::config("qg.nx and qg.ny must be >= 5"));
                }
                if self.qg.obs_interval == 0 {
                    return Err(Error::config("qg.obs_interval must be >= 1"));
                }
                self.qg.params.validate().map_err(|err| Error::config(err.to_string()))?;
                let n_var = self.qg.nx * self.qg.ny;
                if self.observations.m_obs == 0 || self.observations.m_obs > n_var {
                    return Err(Error::config(format!(
                        "observations.m_obs must be in [1, {n_var}]"
                    )));
                }
                if !(self.observations.variance > 0.0) {
                    return Err(Error::config("observations.variance must be > 0"));
                }
            }
            ModelKind::Static1d => {
                let s = &self.static_1d;
                if s.truth.is_empty() {
                    return Err(Error::config("static_1d.truth must be nonempty"));
                }
                let wsum: f64 = s.truth.iter().map(|t| t.0).sum();
                if (wsum - 1.0).abs() > 1e-9 {
                    return Err(Error::config("static_1d.truth weights must sum to 1"));
                }
                if s.truth.iter().any(|t| !(t.2 > 0.0)) {
                    return Err(Error::config("static_1d.truth variances must be > 0"));
                }
                if s.n_samples == 0 || s.grid_points < 3 || s.hist_bins == 0 {
                    return Err(Error::config("static_1d sampling sizes must be positive"));
                }
                if !(s.hist_max > s.hist_min) {
                    return Err(Error::config("static_1d histogram range is empty"));
                }
                if !(s.obs_variance > 0.0) {
                    return Err(Error::config("static_1d.obs_variance must be > 0"));
                }
            }
        }
        if !(self.filter.variance_floor > 0.0) {
            return Err(Error::config("filter.variance_floor must be > 0"));
        }
        if self.filter.gmm.min_members == 0 || self.filter.gmm.max_components == 0 {
            return Err(Error::config("filter.gmm bounds must be >= 1"));
        }
        if let Some(ts) = self.filter.trajectory.step_size {
            if !(ts > 0.0) {
                return Err(Error::config("filter.trajectory.step_size must be > 0"));
            }
        }
        if self.filter.trajectory.n_steps == Some(0) {
            return Err(Error::config("filter.trajectory.n_steps must be >= 1"));
        }
        if let Some(r) = self.filter.denkf.localization_radius {
            if !(r > 0.0) {
                return Err(Error::config("filter.denkf.localization_radius must be > 0"));
            }
        }
        if !(self.filter.denkf.inflation >= 1.0) {
            return Err(Error::config("filter.denkf.inflation must be >= 1"));
        }
        if self.output.rank_stride == 0 {
            return Err(Error::config("output.rank_stride must be >= 1"));
        }
        Ok(())
    }

    /// Trajectory parameters after applying the per-experiment defaults:
    /// QG linear observations h=0.075, m=25 (HMC/ClHMC) or h=0.05, m=15
    /// scaled by the component count (MC-ClHMC); QG wind-magnitude
    /// observations h=0.015/0.0075; three-stage integrator on QG, Verlet
    /// with h=0.05, m=20 on the one-dimensional problem.
    pub fn resolved_trajectory(&self) -> Result<TrajectoryParams> {
        let (dh, dm, dint) = match self.experiment.model {
            ModelKind::Static1d => (0.05, 20, Integrator::Verlet),
            ModelKind::Qg => {
                let mc = matches!(self.filter.kind, FilterKind::McClHmc);
                match self.observations.kind {
                    ObservationKind::Linear => {
                        if mc {
                            (0.05, 15, Integrator::ThreeStage)
                        } else {
                            (0.075, 25, Integrator::ThreeStage)
                        }
                    }
                    ObservationKind::WindMagnitude => {
                        if mc {
                            (0.0075, 15, Integrator::ThreeStage)
                        } else {
                            (0.015, 25, Integrator::ThreeStage)
                        }
                    }
                }
            }
        };
        TrajectoryParams::new(
            self.filter.trajectory.step_size.unwrap_or(dh),
            self.filter.trajectory.n_steps.unwrap_or(dm),
            self.filter.trajectory.integrator.unwrap_or(dint),
        )
    }

    /// Chain schedule after defaults: burn-in 50 for HMC/ClHMC, waived for
    /// MC-ClHMC and the one-dimensional problem; 15 mixing steps throughout.
    pub fn resolved_chain(&self) -> ChainSettings {
        let default_burn = match (self.experiment.model, self.filter.kind) {
            (ModelKind::Static1d, _) => 0,
            (_, FilterKind::McClHmc) => 0,
            _ => 50,
        };
        let default_policy = match self.filter.kind {
            FilterKind::McClHmc => InitPolicy::EnsembleMean, // per-chain starts override this
            _ => InitPolicy::EnsembleMean,
        };
        ChainSettings {
            burn_in: self.filter.chain.burn_in.unwrap_or(default_burn),
            mixing_steps: self.filter.chain.mixing_steps.unwrap_or(15),
            init_policy: self.filter.chain.init_policy.unwrap_or(default_policy),
        }
    }

    /// Variance blending after defaults: 5.0 on QG MC-ClHMC, disabled
    /// elsewhere.
    pub fn resolved_variance_blend(&self) -> f64 {
        self.filter.mc.variance_blend.unwrap_or(match self.experiment.model {
            ModelKind::Qg => 5.0,
            ModelKind::Static1d => 0.0,
        })
    }

    pub fn resolved_scale_step(&self) -> bool {
        self.filter
            .mc
            .scale_step_by_components
            .unwrap_or(matches!(self.experiment.model, ModelKind::Qg))
    }

    /// Prior covariance structure after defaults: the ensemble hybrid with
    /// gamma = 0.1 on QG, the plain diagonal on the one-dimensional problem.
    pub fn resolved_prior_covariance(&self) -> PriorCovariance {
        self.filter
            .prior_covariance
            .unwrap_or(match self.experiment.model {
                ModelKind::Qg => PriorCovariance::EnsembleHybrid { gamma: 0.1 },
                ModelKind::Static1d => PriorCovariance::Diagonal,
            })
    }

    /// Mixture EM settings (diagonal covariances enforced).
    pub fn resolved_gmm(&self) -> GmmSelectionSettings {
        let mut g = self.filter.gmm.clone();
        g.em.diagonal_only = true;
        g
    }

    /// Fully resolved copy with every optional knob pinned; recorded in run
    /// manifests so a run can be reproduced from the manifest alone.
    pub fn resolve(&self) -> Result<ExperimentConfig> {
        let trajectory = self.resolved_trajectory()?;
        let chain = self.resolved_chain();
        let mut out = self.clone();
        out.filter.trajectory = TrajectorySection {
            step_size: Some(trajectory.step_size),
            n_steps: Some(trajectory.n_steps),
            integrator: Some(trajectory.integrator),
        };
        out.filter.chain = ChainSection {
            burn_in: Some(chain.burn_in),
            mixing_steps: Some(chain.mixing_steps),
            init_policy: Some(chain.init_policy),
        };
        out.filter.mc = McSection {
            variance_blend: Some(self.resolved_variance_blend()),
            scale_step_by_components: Some(self.resolved_scale_step()),
        };
        out.filter.prior_covariance = Some(self.resolved_prior_covariance());
        out.filter.gmm = self.resolved_gmm();
        Ok(out)
    }
}

/// EM settings knob shared with the CLI `fit-gmm` subcommand.
pub fn default_em_settings() -> EmSettings {
    EmSettings::default()
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL_QG: &str = r#"
[experiment]
model = "qg"
n_ens = 20
cycles = 5
seed = 7
output_dir = "out/test"
"#;

    #[test]
    fn minimal_config_parses_with_defaults() {
        let cfg = ExperimentConfig::from_toml_str(MINIMAL_QG).unwrap();
        assert_eq!(cfg.qg.nx, 65);
        assert_eq!(cfg.observations.m_obs, 300);
        let t = cfg.resolved_trajectory().unwrap();
        assert_eq!(t.n_steps, 15); // MC-ClHMC default on QG
        assert_eq!(cfg.resolved_chain().burn_in, 0);
        assert_eq!(cfg.resolved_variance_blend(), 5.0);
    }

    #[test]
    fn unknown_keys_rejected() {
        let bad = format!("{MINIMAL_QG}\n[experiment_extra]\nfoo = 1\n");
        assert!(ExperimentConfig::from_toml_str(&bad).is_err());
        let bad2 = MINIMAL_QG.replace("cycles = 5", "cycles = 5\nbogus_key = 3");
        assert!(ExperimentConfig::from_toml_str(&bad2).is_err());
    }

    #[test]
    fn semantic_validation() {
        let bad = MINIMAL_QG.replace("n_ens = 20", "n_ens = 1");
        assert!(ExperimentConfig::from_toml_str(&bad).is_err());
    }

    #[test]
    fn resolve_round_trips_through_validation() {
        let cfg = ExperimentConfig::from_toml_str(MINIMAL_QG).unwrap();
        let resolved = cfg.resolve().unwrap();
        resolved.validate().unwrap();
        // resolved config re-serializes and re-parses identically
        let text = toml::to_string(&resolved).unwrap();
        let back = ExperimentConfig::from_toml_str(&text).unwrap();
        assert_eq!(
            back.filter.trajectory.step_size,
            resolved.filter.trajectory.step_size
        );
    }

    #[test]
    fn hmc_defaults_differ_by_observation_kind() {
        let mut text = MINIMAL_QG.to_string();
        text.push_str("\n[filter]\nkind = \"hmc\"\n");
        let cfg = ExperimentConfig::from_toml_str(&text).unwrap();
        let t = cfg.resolved_trajectory().unwrap();
        assert_eq!((t.step_size, t.n_steps), (0.075, 25));
        assert_eq!(cfg.resolved_chain().burn_in, 50);

        let wind = text.replace(
            "[filter]",
            "[observations]\nkind = \"wind_magnitude\"\n\n[filter]",
        );
        let cfg = ExperimentConfig::from_toml_str(&wind).unwrap();
        assert_eq!(cfg.resolved_trajectory().unwrap().step_size, 0.015);
    }
}
