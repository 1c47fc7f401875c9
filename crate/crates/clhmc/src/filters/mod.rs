//! Sequential assimilation drivers: forecast propagation, the HMC, ClHMC and
//! MC-ClHMC analysis steps, chain initialization, mass-matrix construction,
//! per-chain sample allocation, and the DEnKF baseline.

mod denkf;

pub use denkf::denkf_analysis;

use std::sync::Arc;
use std::time::Instant;

use log::warn;
use rayon::prelude::*;

use crate::ensemble::{
    ensemble_anomalies, ensemble_covariance, ensemble_mean, CovarianceEstimate, Ensemble,
    Observation, StateVector,
};
use crate::error::{Error, Result};
use crate::gmm::{select_model, Criterion, EmSettings, GmmParams, ModelSelectionReport};
use crate::hmc::{run_chain, ChainConfig, ChainStats, MassMatrix, TrajectoryParams};
use crate::potentials::{
    obs_misfit, GaussianPotential, GaussianPriorSpec, MixturePotential, MixturePriorSpec,
    ObservationOperator,
};
use crate::rng::{derive_seed2, tags};

/// Forward model contract: advance one state from t_from to t_to.
/// Implementations must be reentrant; members propagate concurrently.
pub trait ModelPropagator: Send + Sync {
    fn advance(&self, state: &StateVector, t_from: f64, t_to: f64) -> Result<StateVector>;
}

/// The identity model (static problems).
pub struct IdentityModel;

impl ModelPropagator for IdentityModel {
    fn advance(&self, state: &StateVector, _t_from: f64, _t_to: f64) -> Result<StateVector> {
        Ok(state.clone())
    }
}

/// Distance between two state indices, used by covariance localization.
pub type DistanceFn = Arc<dyn Fn(usize, usize) -> f64 + Send + Sync>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum FilterKind {
    #[serde(rename = "hmc")]
    Hmc,
    #[serde(rename = "clhmc")]
    ClHmc,
    #[serde(rename = "mc_clhmc")]
    McClHmc,
    #[serde(rename = "denkf")]
    Denkf,
    /// No assimilation: analysis = forecast. Baseline for skill comparisons.
    #[serde(rename = "free_run")]
    FreeRun,
}

/// Structure of the Gaussian prior covariance in the HMC analysis (and the
/// single-component fallback of the cluster filters).
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum PriorCovariance {
    /// Diagonal of the sample covariance.
    Diagonal,
    /// Full sample covariance (small problems only; must be nonsingular
    /// after flooring, i.e. n_ens > n_var).
    Full,
    /// gamma * diag(sample variance) + anomaly outer product, solved via the
    /// Woodbury identity. Carries the ensemble's spatial correlations at
    /// O(n_var * n_ens) cost; the default for high-dimensional models where
    /// a diagonal prior would confine updates to the observed coordinates.
    EnsembleHybrid { gamma: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitPolicy {
    EnsembleMean,
    MaxWeightComponentMean,
    MaxLikelihoodComponentMean,
}

/// Chain schedule shared by the sampling filters.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChainSettings {
    pub burn_in: usize,
    pub mixing_steps: usize,
    pub init_policy: InitPolicy,
}

impl Default for ChainSettings {
    fn default() -> Self {
        Self {
            burn_in: 50,
            mixing_steps: 15,
            init_policy: InitPolicy::EnsembleMean,
        }
    }
}

/// Mixture-prior construction settings for the cluster filters.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GmmSelectionSettings {
    pub criterion: Criterion,
    pub max_components: usize,
    pub min_members: usize,
    pub em: EmSettings,
}

impl Default for GmmSelectionSettings {
    fn default() -> Self {
        Self {
            criterion: Criterion::Aic,
            max_components: 6,
            min_members: 5,
            em: EmSettings::default(),
        }
    }
}

/// DEnKF tuning: Gaspari-Cohn localization radius (grid cells) and the
/// multiplicative anomaly inflation applied after the update.
#[derive(Clone)]
pub struct DenkfSettings {
    pub localization_radius: Option<f64>,
    pub inflation: f64,
    /// Distance between state indices; defaults to |i - j| when absent.
    pub distance: Option<DistanceFn>,
}

impl Default for DenkfSettings {
    fn default() -> Self {
        Self {
            localization_radius: Some(12.0),
            inflation: 1.06,
            distance: None,
        }
    }
}

impl std::fmt::Debug for DenkfSettings {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DenkfSettings")
            .field("localization_radius", &self.localization_radius)
            .field("inflation", &self.inflation)
            .field("distance", &self.distance.as_ref().map(|_| "<fn>"))
            .finish()
    }
}

/// Everything an analysis step needs beyond the forecast and observation.
#[derive(Debug, Clone)]
pub struct FilterConfig {
    pub kind: FilterKind,
    pub trajectory: TrajectoryParams,
    pub chain: ChainSettings,
    pub gmm: GmmSelectionSettings,
    pub denkf: DenkfSettings,
    /// MC-ClHMC local variances are averaged with this constant before the
    /// reciprocal is taken; 0 disables blending.
    pub variance_blend: f64,
    /// Divide the trajectory step size by the fitted component count
    /// (MC-ClHMC tuning rule for the QG runs).
    pub scale_step_by_components: bool,
    /// Gaussian-prior covariance structure.
    pub prior_covariance: PriorCovariance,
    /// Absolute floor on prior/mass variances (guards zero-spread
    /// coordinates such as fixed boundary nodes).
    pub variance_floor: f64,
    pub seed: u64,
}

impl FilterConfig {
    pub fn new(kind: FilterKind, trajectory: TrajectoryParams, seed: u64) -> Self {
        Self {
            kind,
            trajectory,
            chain: ChainSettings::default(),
            gmm: GmmSelectionSettings::default(),
            denkf: DenkfSettings::default(),
            variance_blend: 0.0,
            scale_step_by_components: false,
            prior_covariance: PriorCovariance::Diagonal,
            variance_floor: 1e-8,
            seed,
        }
    }
}

/// Wall-clock timings of one analysis step.
#[derive(Debug, Clone, Copy, Default, serde::Serialize)]
pub struct CycleTimings {
    pub analysis_secs: f64,
}

/// Output of one assimilation cycle.
#[derive(Debug)]
pub struct CycleResult {
    pub forecast: Ensemble,
    pub analysis: Ensemble,
    pub gmm_report: Option<ModelSelectionReport>,
    pub chain_stats: Vec<ChainStats>,
    pub timings: CycleTimings,
}

impl CycleResult {
    pub fn mean_acceptance_rate(&self) -> Option<f64> {
        if self.chain_stats.is_empty() {
            return None;
        }
        let total_props: usize = self.chain_stats.iter().map(|s| s.proposals).sum();
        let total_acc: usize = self.chain_stats.iter().map(|s| s.acceptances).sum();
        Some(total_acc as f64 / total_props.max(1) as f64)
    }
}

/// Propagate every member independently; order preserved, failures reported
/// with the member index.
pub fn forecast(
    model: &dyn ModelPropagator,
    analysis: &Ensemble,
    t_from: f64,
    t_to: f64,
) -> Result<Ensemble> {
    let advanced: Vec<Result<StateVector>> = analysis
        .members()
        .par_iter()
        .map(|m| model.advance(m, t_from, t_to))
        .collect();
    let mut members = Vec::with_capacity(advanced.len());
    for (e, r) in advanced.into_iter().enumerate() {
        members.push(r.map_err(|err| Error::MemberFailure {
            member: e,
            source: Box::new(err),
        })?);
    }
    Ensemble::new(members, analysis.time_index() + 1)
}

/// Diagonal mass matrix from forecast precisions: 1 / variance per
/// coordinate, computed from all members or from the `subset` hard-assigned
/// to one mixture component. Local variances are averaged with
/// `variance_blend` (when positive) before the reciprocal; `floor` guards
/// zero-spread coordinates.
pub fn build_mass_matrix(
    forecast: &Ensemble,
    subset: Option<&[usize]>,
    variance_blend: f64,
    floor: f64,
) -> Result<MassMatrix> {
    let n = forecast.n_var();
    let members: Vec<&StateVector> = match subset {
        None => forecast.members().iter().collect(),
        Some(idx) => {
            if idx.iter().any(|&e| e >= forecast.n_ens()) {
                return Err(Error::invalid("member index out of range"));
            }
            idx.iter().map(|&e| forecast.member(e)).collect()
        }
    };
    if members.is_empty() {
        return Err(Error::invalid("mass matrix needs at least one member"));
    }
    let count = members.len();
    let mut mean = vec![0.0; n];
    for m in &members {
        for (acc, v) in mean.iter_mut().zip(m.as_slice()) {
            *acc += v;
        }
    }
    for v in &mut mean {
        *v /= count as f64;
    }
    let mut var = vec![0.0; n];
    if count >= 2 {
        for m in &members {
            for ((acc, v), mu) in var.iter_mut().zip(m.as_slice()).zip(&mean) {
                let d = v - mu;
                *acc += d * d;
            }
        }
        let scale = 1.0 / (count as f64 - 1.0);
        for v in &mut var {
            *v *= scale;
        }
    }
    let diagonal: Vec<f64> = var
        .iter()
        .map(|&v| {
            let blended = if variance_blend > 0.0 {
                0.5 * (v + variance_blend)
            } else {
                v
            };
            1.0 / blended.max(floor)
        })
        .collect();
    MassMatrix::new(diagonal)
}

/// Starting point of an analysis chain.
pub fn init_chain_position(
    forecast: &Ensemble,
    gmm: Option<&GmmParams>,
    policy: InitPolicy,
    obs: Option<(&Observation, &dyn ObservationOperator)>,
) -> Result<StateVector> {
    match policy {
        InitPolicy::EnsembleMean => Ok(ensemble_mean(forecast)),
        InitPolicy::MaxWeightComponentMean => {
            let gmm = gmm.ok_or_else(|| {
                Error::invalid("component init policies need a fitted mixture")
            })?;
            let best = (0..gmm.n_c())
                .max_by(|&a, &b| gmm.weights()[a].partial_cmp(&gmm.weights()[b]).unwrap())
                .unwrap();
            Ok(gmm.mean(best).clone())
        }
        InitPolicy::MaxLikelihoodComponentMean => {
            let gmm = gmm.ok_or_else(|| {
                Error::invalid("component init policies need a fitted mixture")
            })?;
            let (y, op) =
                obs.ok_or_else(|| Error::invalid("likelihood init policy needs the observation"))?;
            let best = (0..gmm.n_c())
                .map(|i| Ok((i, obs_misfit(gmm.mean(i).as_slice(), y, op)?)))
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
                .unwrap()
                .0;
            Ok(gmm.mean(best).clone())
        }
    }
}

/// Per-component chain sizes proportional to tau_i times the likelihood of
/// the component mean, normalized to sum exactly to n_ens by
/// largest-remainder rounding; every component with positive weight ratio
/// receives at least one sample.
pub fn allocate_chain_sizes(
    gmm: &GmmParams,
    y: &Observation,
    op: &dyn ObservationOperator,
    n_ens: usize,
) -> Result<Vec<usize>> {
    let n_c = gmm.n_c();
    if n_ens == 0 {
        return Err(Error::invalid("n_ens must be >= 1"));
    }
    if n_c == 1 {
        return Ok(vec![n_ens]);
    }
    // log(tau_i l_i), stabilized by the max before exponentiation
    let mut logs = Vec::with_capacity(n_c);
    for i in 0..n_c {
        let misfit = obs_misfit(gmm.mean(i).as_slice(), y, op)?;
        logs.push(gmm.weights()[i].ln() - misfit);
    }
    let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut probs: Vec<f64>;
    if max.is_finite() {
        let raw: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = raw.iter().sum();
        probs = raw.iter().map(|r| r / total).collect();
    } else {
        warn!("allocate_chain_sizes: all component likelihoods underflowed; allocating equally");
        probs = vec![1.0 / n_c as f64; n_c];
    }
    // components with vanished weight ratio get nothing; renormalize
    let total: f64 = probs.iter().sum();
    for p in &mut probs {
        *p /= total;
    }

    let mut counts: Vec<usize> = probs.iter().map(|p| (n_ens as f64 * p) as usize).collect();
    let mut assigned: usize = counts.iter().sum();
    let mut remainders: Vec<(usize, f64)> = probs
        .iter()
        .enumerate()
        .map(|(i, p)| (i, n_ens as f64 * p - counts[i] as f64))
        .collect();
    remainders.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    let mut k = 0;
    while assigned < n_ens {
        counts[remainders[k % n_c].0] += 1;
        assigned += 1;
        k += 1;
    }
    // every component with positive probability keeps at least one sample
    // (n_ens >= n_c holds in filter use: n_c <= n_ens / min_members)
    if n_ens >= n_c {
        loop {
            let Some(zero) = (0..n_c).find(|&i| probs[i] > 0.0 && counts[i] == 0) else {
                break;
            };
            let donor = (0..n_c)
                .max_by(|&a, &b| counts[a].cmp(&counts[b]))
                .unwrap();
            if counts[donor] <= 1 {
                break;
            }
            counts[donor] -= 1;
            counts[zero] += 1;
        }
    }
    Ok(counts)
}

fn floored_covariance(cov: CovarianceEstimate, floor: f64) -> CovarianceEstimate {
    match cov {
        CovarianceEstimate::Diagonal(v) => {
            CovarianceEstimate::Diagonal(v.into_iter().map(|x| x.max(floor)).collect())
        }
        CovarianceEstimate::Full(mut m) => {
            for i in 0..m.nrows() {
                if m[(i, i)] < floor {
                    m[(i, i)] = floor;
                }
            }
            CovarianceEstimate::Full(m)
        }
    }
}

fn hmc_analysis_inner(
    forecast: Ensemble,
    y: &Observation,
    op: Arc<dyn ObservationOperator>,
    cfg: &FilterConfig,
    gmm: Option<&GmmParams>,
    gmm_report: Option<ModelSelectionReport>,
) -> Result<CycleResult> {
    let started = Instant::now();
    let n_ens = forecast.n_ens();
    let prior = match cfg.prior_covariance {
        PriorCovariance::Diagonal | PriorCovariance::Full => {
            let mean = ensemble_mean(&forecast);
            let cov = floored_covariance(
                ensemble_covariance(
                    &forecast,
                    matches!(cfg.prior_covariance, PriorCovariance::Diagonal),
                )?,
                cfg.variance_floor,
            );
            GaussianPriorSpec::new(mean, &cov)?
        }
        PriorCovariance::EnsembleHybrid { gamma } => {
            let (mean, anomalies) = ensemble_anomalies(&forecast);
            GaussianPriorSpec::ensemble_hybrid(mean, &anomalies, gamma, cfg.variance_floor)?
        }
    };
    let initial = init_chain_position(&forecast, gmm, cfg.chain.init_policy, Some((y, op.as_ref())))?;
    let mass = build_mass_matrix(&forecast, None, 0.0, cfg.variance_floor)?;
    let potential = GaussianPotential::new(prior, y.clone(), op);
    let chain_cfg = ChainConfig {
        burn_in: cfg.chain.burn_in,
        mixing_steps: cfg.chain.mixing_steps,
        seed: derive_seed2(cfg.seed, tags::CHAIN, 0),
        initial,
    };
    let (mut analysis, stats) = run_chain(&potential, &mass, &cfg.trajectory, &chain_cfg, n_ens)?;
    analysis.set_time_index(forecast.time_index());
    Ok(CycleResult {
        forecast,
        analysis,
        gmm_report,
        chain_stats: vec![stats],
        timings: CycleTimings {
            analysis_secs: started.elapsed().as_secs_f64(),
        },
    })
}

/// Original HMC filter analysis: Gaussian prior from the forecast ensemble
/// moments, one chain, n_ens posterior samples.
pub fn hmc_analysis(
    forecast: Ensemble,
    y: &Observation,
    op: Arc<dyn ObservationOperator>,
    cfg: &FilterConfig,
) -> Result<CycleResult> {
    hmc_analysis_inner(forecast, y, op, cfg, None, None)
}

fn candidate_counts(cfg: &FilterConfig, n_ens: usize) -> Vec<usize> {
    let cap = (n_ens / cfg.gmm.min_members.max(1)).max(1);
    (1..=cfg.gmm.max_components.max(1).min(cap).min(n_ens)).collect()
}

fn fit_prior_mixture(
    forecast: &Ensemble,
    cfg: &FilterConfig,
) -> Result<ModelSelectionReport> {
    let candidates = candidate_counts(cfg, forecast.n_ens());
    select_model(
        forecast,
        &candidates,
        cfg.gmm.criterion,
        cfg.gmm.min_members,
        derive_seed2(cfg.seed, tags::GMM_FIT, 0),
        &cfg.gmm.em,
    )
}

/// Cluster HMC filter analysis: fit a mixture prior to the forecast
/// ensemble, then sample the mixture posterior with a single chain. Falls
/// back to the plain HMC analysis when one component is selected or the fit
/// fails.
pub fn clhmc_analysis(
    forecast: Ensemble,
    y: &Observation,
    op: Arc<dyn ObservationOperator>,
    cfg: &FilterConfig,
) -> Result<CycleResult> {
    let report = match fit_prior_mixture(&forecast, cfg) {
        Ok(r) => r,
        Err(e) => {
            warn!("ClHMC: mixture fit failed ({e}); falling back to the Gaussian-prior analysis");
            return hmc_analysis_inner(forecast, y, op, cfg, None, None);
        }
    };
    if report.selected_n_c == 1 {
        let gmm = report.selected().fit.params.clone();
        return hmc_analysis_inner(forecast, y, op, cfg, Some(&gmm), Some(report));
    }
    let started = Instant::now();
    let n_ens = forecast.n_ens();
    let gmm = report.selected().fit.params.clone();
    let spec = MixturePriorSpec::new(gmm.clone())?;
    let initial = init_chain_position(
        &forecast,
        Some(&gmm),
        cfg.chain.init_policy,
        Some((y, op.as_ref())),
    )?;
    let mass = build_mass_matrix(&forecast, None, 0.0, cfg.variance_floor)?;
    let potential = MixturePotential::new(spec, y.clone(), op);
    let chain_cfg = ChainConfig {
        burn_in: cfg.chain.burn_in,
        mixing_steps: cfg.chain.mixing_steps,
        seed: derive_seed2(cfg.seed, tags::CHAIN, 0),
        initial,
    };
    let (mut analysis, stats) = run_chain(&potential, &mass, &cfg.trajectory, &chain_cfg, n_ens)?;
    analysis.set_time_index(forecast.time_index());
    Ok(CycleResult {
        forecast,
        analysis,
        gmm_report: Some(report),
        chain_stats: vec![stats],
        timings: CycleTimings {
            analysis_secs: started.elapsed().as_secs_f64(),
        },
    })
}

/// Multi-chain ClHMC analysis: one chain per mixture component, every chain
/// targeting the same full mixture posterior. Chain i starts at the i-th
/// component mean with a locally built mass matrix and draws its allocated
/// share of the n_ens samples. Chains run concurrently on independent seed
/// streams; the result does not depend on scheduling order.
pub fn mc_clhmc_analysis(
    forecast: Ensemble,
    y: &Observation,
    op: Arc<dyn ObservationOperator>,
    cfg: &FilterConfig,
) -> Result<CycleResult> {
    let report = match fit_prior_mixture(&forecast, cfg) {
        Ok(r) => r,
        Err(e) => {
            warn!("MC-ClHMC: mixture fit failed ({e}); falling back to the Gaussian-prior analysis");
            return hmc_analysis_inner(forecast, y, op, cfg, None, None);
        }
    };
    if report.selected_n_c == 1 {
        let gmm = report.selected().fit.params.clone();
        return hmc_analysis_inner(forecast, y, op, cfg, Some(&gmm), Some(report));
    }
    let started = Instant::now();
    let n_ens = forecast.n_ens();
    let selected = report.selected();
    let gmm = selected.fit.params.clone();
    let labels = selected.fit.responsibilities.hard_assignments();
    let n_c = gmm.n_c();
    let counts = allocate_chain_sizes(&gmm, y, op.as_ref(), n_ens)?;

    let mut trajectory = cfg.trajectory;
    if cfg.scale_step_by_components {
        trajectory.step_size /= n_c as f64;
    }

    let spec = MixturePriorSpec::new(gmm.clone())?;
    let potential = MixturePotential::new(spec, y.clone(), op);

    let chain_inputs: Vec<(usize, usize)> = counts
        .iter()
        .enumerate()
        .filter(|(_, &c)| c > 0)
        .map(|(i, &c)| (i, c))
        .collect();
    let chain_outputs: Vec<Result<(Ensemble, ChainStats)>> = chain_inputs
        .par_iter()
        .map(|&(i, count)| {
            let members: Vec<usize> = labels
                .iter()
                .enumerate()
                .filter(|(_, &l)| l == i)
                .map(|(e, _)| e)
                .collect();
            let mass = build_mass_matrix(
                &forecast,
                if members.is_empty() {
                    None
                } else {
                    Some(&members)
                },
                cfg.variance_blend,
                cfg.variance_floor,
            )?;
            let chain_cfg = ChainConfig {
                burn_in: cfg.chain.burn_in,
                mixing_steps: cfg.chain.mixing_steps,
                seed: derive_seed2(cfg.seed, tags::CHAIN, i as u64),
                initial: gmm.mean(i).clone(),
            };
            run_chain(&potential, &mass, &trajectory, &chain_cfg, count)
        })
        .collect();

    let mut members = Vec::with_capacity(n_ens);
    let mut chain_stats = Vec::with_capacity(chain_inputs.len());
    for out in chain_outputs {
        let (samples, stats) = out?;
        members.extend(samples.members().iter().cloned());
        chain_stats.push(stats);
    }
    let mut analysis = Ensemble::new(members, forecast.time_index())?;
    analysis.set_time_index(forecast.time_index());
    Ok(CycleResult {
        forecast,
        analysis,
        gmm_report: Some(report),
        chain_stats,
        timings: CycleTimings {
            analysis_secs: started.elapsed().as_secs_f64(),
        },
    })
}

/// Dispatch one analysis step according to the configured filter kind.
pub fn analysis_step(
    forecast_ens: Ensemble,
    y: &Observation,
    op: Arc<dyn ObservationOperator>,
    cfg: &FilterConfig,
) -> Result<CycleResult> {
    match cfg.kind {
        FilterKind::Hmc => hmc_analysis(forecast_ens, y, op, cfg),
        FilterKind::ClHmc => clhmc_analysis(forecast_ens, y, op, cfg),
        FilterKind::McClHmc => mc_clhmc_analysis(forecast_ens, y, op, cfg),
        FilterKind::Denkf => denkf_analysis(forecast_ens, y, op.as_ref(), cfg),
        FilterKind::FreeRun => {
            let analysis = forecast_ens.clone();
            Ok(CycleResult {
                forecast: forecast_ens,
                analysis,
                gmm_report: None,
                chain_stats: Vec::new(),
                timings: CycleTimings::default(),
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hmc::Integrator;
    use crate::potentials::IdentityOperator;
    use approx::assert_relative_eq;

    struct DoublingModel;
    impl ModelPropagator for DoublingModel {
        fn advance(&self, state: &StateVector, _a: f64, _b: f64) -> Result<StateVector> {
            StateVector::new(state.as_slice().iter().map(|v| 2.0 * v).collect())
        }
    }

    struct FailingModel;
    impl ModelPropagator for FailingModel {
        fn advance(&self, state: &StateVector, _a: f64, _b: f64) -> Result<StateVector> {
            if state[0] < 0.0 {
                Err(Error::ModelBlowUp)
            } else {
                Ok(state.clone())
            }
        }
    }

    fn ens(rows: &[&[f64]]) -> Ensemble {
        Ensemble::from_rows(rows.iter().map(|r| r.to_vec()).collect(), 0).unwrap()
    }

    #[test]
    fn forecast_models() {
        let e = ens(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let id = forecast(&IdentityModel, &e, 0.0, 1.0).unwrap();
        assert_eq!(id.member(0).as_slice(), &[1.0, 2.0]);
        assert_eq!(id.time_index(), 1);

        let doubled = forecast(&DoublingModel, &e, 0.0, 1.0).unwrap();
        assert_eq!(doubled.member(1).as_slice(), &[6.0, 8.0]);

        let bad = ens(&[&[1.0], &[-1.0]]);
        match forecast(&FailingModel, &bad, 0.0, 1.0) {
            Err(Error::MemberFailure { member, .. }) => assert_eq!(member, 1),
            other => panic!("expected member failure, got {other:?}"),
        }
    }

    #[test]
    fn mass_matrix_examples() {
        // per-coordinate variance 4 -> mass 0.25
        let e = ens(&[&[-2.0], &[2.0]]); // sample variance 8... use spread for 4
        let e4 = ens(&[&[-1.414213562373095], &[1.414213562373095]]);
        let m = build_mass_matrix(&e4, None, 0.0, 1e-8).unwrap();
        assert_relative_eq!(m.diagonal()[0], 0.25, epsilon = 1e-12);

        // zero-spread coordinate -> 1/floor
        let flat = ens(&[&[1.0], &[1.0]]);
        let m = build_mass_matrix(&flat, None, 0.0, 1e-8).unwrap();
        assert_relative_eq!(m.diagonal()[0], 1e8);

        // local mass for a 2-member subset with blending: variance of
        // members 0,1 is 8, blended (8+5)/2 = 6.5, mass 1/6.5
        let four = ens(&[&[-2.0], &[2.0], &[10.0], &[12.0]]);
        let m = build_mass_matrix(&four, Some(&[0, 1]), 5.0, 1e-8).unwrap();
        assert_relative_eq!(m.diagonal()[0], 1.0 / 6.5, epsilon = 1e-12);
        let _ = e;
    }

    #[test]
    fn allocation_examples() {
        let op = IdentityOperator::new(1);
        // symmetric: equal likelihoods at the means
        let gmm = GmmParams::diagonal(
            vec![0.5, 0.5],
            vec![vec![-1.0], vec![1.0]],
            vec![vec![0.1], vec![0.1]],
        )
        .unwrap();
        let y = Observation::new(vec![0.0], vec![1.0]).unwrap();
        assert_eq!(allocate_chain_sizes(&gmm, &y, &op, 100).unwrap(), vec![50, 50]);

        // likelihood ratio 4:1 -> (80, 20)
        let mu2 = (2.0 * 4.0f64.ln()).sqrt();
        let gmm = GmmParams::diagonal(
            vec![0.5, 0.5],
            vec![vec![0.0], vec![mu2]],
            vec![vec![0.1], vec![0.1]],
        )
        .unwrap();
        let counts = allocate_chain_sizes(&gmm, &y, &op, 100).unwrap();
        assert_eq!(counts, vec![80, 20]);

        // single component gets everything
        let gmm = GmmParams::diagonal(vec![1.0], vec![vec![0.0]], vec![vec![1.0]]).unwrap();
        assert_eq!(allocate_chain_sizes(&gmm, &y, &op, 37).unwrap(), vec![37]);
    }

    #[test]
    fn allocation_sums_and_equivariance() {
        let op = IdentityOperator::new(1);
        let y = Observation::new(vec![0.3], vec![1.2]).unwrap();
        let gmm = GmmParams::diagonal(
            vec![0.2, 0.5, 0.3],
            vec![vec![-2.0], vec![0.1], vec![1.5]],
            vec![vec![0.1], vec![0.2], vec![0.15]],
        )
        .unwrap();
        let counts = allocate_chain_sizes(&gmm, &y, &op, 57).unwrap();
        assert_eq!(counts.iter().sum::<usize>(), 57);
        assert!(counts.iter().all(|&c| c >= 1));

        let permuted = GmmParams::diagonal(
            vec![0.3, 0.2, 0.5],
            vec![vec![1.5], vec![-2.0], vec![0.1]],
            vec![vec![0.15], vec![0.1], vec![0.2]],
        )
        .unwrap();
        let p_counts = allocate_chain_sizes(&permuted, &y, &op, 57).unwrap();
        assert_eq!(p_counts, vec![counts[2], counts[0], counts[1]]);
    }

    #[test]
    fn allocation_far_means_still_covered() {
        // distant component keeps one sample
        let op = IdentityOperator::new(1);
        let y = Observation::new(vec![0.0], vec![0.5]).unwrap();
        let gmm = GmmParams::diagonal(
            vec![0.5, 0.5],
            vec![vec![0.0], vec![6.0]],
            vec![vec![0.1], vec![0.1]],
        )
        .unwrap();
        let counts = allocate_chain_sizes(&gmm, &y, &op, 20).unwrap();
        assert_eq!(counts.iter().sum::<usize>(), 20);
        assert!(counts[1] >= 1);
    }

    fn sampling_cfg(kind: FilterKind, seed: u64) -> FilterConfig {
        let mut cfg = FilterConfig::new(
            kind,
            TrajectoryParams::new(0.1, 10, Integrator::Verlet).unwrap(),
            seed,
        );
        cfg.chain.burn_in = 30;
        cfg.chain.mixing_steps = 3;
        cfg
    }

    fn gaussian_forecast(n: usize, mean: f64, std: f64, seed: u64) -> Ensemble {
        use rand_distr::Distribution;
        let mut rng = crate::rng::rng_from_seed(seed);
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let z: f64 = rand_distr::StandardNormal.sample(&mut rng);
                vec![mean + std * z]
            })
            .collect();
        Ensemble::from_rows(rows, 0).unwrap()
    }

    #[test]
    fn hmc_analysis_matches_conjugate_posterior() {
        let forecast_ens = gaussian_forecast(400, 0.0, 1.0, 99);
        let y = Observation::new(vec![1.0], vec![1.0]).unwrap();
        let op: Arc<dyn ObservationOperator> = Arc::new(IdentityOperator::new(1));
        let cfg = sampling_cfg(FilterKind::Hmc, 1234);
        let result = hmc_analysis(forecast_ens.clone(), &y, op, &cfg).unwrap();
        assert_eq!(result.analysis.n_ens(), 400);

        // conjugate oracle from the sample moments actually used
        let xb = ensemble_mean(&forecast_ens).as_slice()[0];
        let b = ensemble_covariance(&forecast_ens, true).unwrap().diagonal()[0];
        let post_mean = (xb / b + 1.0 / 1.0) / (1.0 / b + 1.0 / 1.0);
        let post_var = 1.0 / (1.0 / b + 1.0 / 1.0);
        let mean: f64 = result
            .analysis
            .members()
            .iter()
            .map(|m| m[0])
            .sum::<f64>()
            / 400.0;
        // generous n_eff for the correlated chain
        let tol = 3.0 * (post_var / 40.0f64).sqrt();
        assert!(
            (mean - post_mean).abs() < tol,
            "sample mean {mean} vs conjugate {post_mean} (tol {tol})"
        );
    }

    #[test]
    fn hmc_analysis_is_deterministic() {
        let forecast_ens = gaussian_forecast(50, 0.3, 0.8, 5);
        let y = Observation::new(vec![0.5], vec![2.0]).unwrap();
        let op: Arc<dyn ObservationOperator> = Arc::new(IdentityOperator::new(1));
        let cfg = sampling_cfg(FilterKind::Hmc, 42);
        let a = hmc_analysis(forecast_ens.clone(), &y, op.clone(), &cfg).unwrap();
        let b = hmc_analysis(forecast_ens, &y, op, &cfg).unwrap();
        for e in 0..50 {
            assert_eq!(a.analysis.member(e).as_slice(), b.analysis.member(e).as_slice());
        }
    }

    #[test]
    fn clhmc_single_component_reproduces_hmc_bit_for_bit() {
        let forecast_ens = gaussian_forecast(60, -0.2, 1.1, 77);
        let y = Observation::new(vec![0.1], vec![1.5]).unwrap();
        let op: Arc<dyn ObservationOperator> = Arc::new(IdentityOperator::new(1));
        let mut cfg = sampling_cfg(FilterKind::ClHmc, 31);
        cfg.gmm.max_components = 1; // force the single-component path
        let cl = clhmc_analysis(forecast_ens.clone(), &y, op.clone(), &cfg).unwrap();
        let hmc = hmc_analysis(forecast_ens, &y, op, &cfg).unwrap();
        assert!(cl.gmm_report.is_some());
        for e in 0..60 {
            assert_eq!(
                cl.analysis.member(e).as_slice(),
                hmc.analysis.member(e).as_slice()
            );
        }
    }

    #[test]
    fn clhmc_single_gaussian_forecast_behaves_as_hmc() {
        // model selection on unimodal data picks one component, hence the
        // fallback path
        let forecast_ens = gaussian_forecast(100, 0.0, 1.0, 3);
        let y = Observation::new(vec![0.2], vec![1.0]).unwrap();
        let op: Arc<dyn ObservationOperator> = Arc::new(IdentityOperator::new(1));
        let cfg = sampling_cfg(FilterKind::ClHmc, 7);
        let result = clhmc_analysis(forecast_ens, &y, op, &cfg).unwrap();
        assert_eq!(result.gmm_report.as_ref().unwrap().selected_n_c, 1);
        assert_eq!(result.chain_stats.len(), 1);
    }

    #[test]
    fn mc_clhmc_covers_bimodal_forecast() {
        use rand_distr::Distribution;
        let mut rng = crate::rng::rng_from_seed(11);
        let rows: Vec<Vec<f64>> = (0..100)
            .map(|e| {
                let z: f64 = rand_distr::StandardNormal.sample(&mut rng);
                let center = if e % 2 == 0 { -3.0 } else { 3.0 };
                vec![center + 0.4 * z]
            })
            .collect();
        let forecast_ens = Ensemble::from_rows(rows, 0).unwrap();
        let y = Observation::new(vec![0.0], vec![4.0]).unwrap();
        let op: Arc<dyn ObservationOperator> = Arc::new(IdentityOperator::new(1));
        let mut cfg = sampling_cfg(FilterKind::McClHmc, 8);
        cfg.chain.burn_in = 0;
        let result = mc_clhmc_analysis(forecast_ens, &y, op, &cfg).unwrap();
        assert_eq!(result.analysis.n_ens(), 100);
        let report = result.gmm_report.as_ref().unwrap();
        assert_eq!(report.selected_n_c, 2);
        assert_eq!(result.chain_stats.len(), 2);
        // both modes represented
        let neg = result
            .analysis
            .members()
            .iter()
            .filter(|m| m[0] < 0.0)
            .count();
        assert!(neg >= 10 && neg <= 90, "mode balance {neg}/100");
    }

    #[test]
    fn mc_clhmc_is_deterministic_across_runs() {
        let forecast_ens = {
            use rand_distr::Distribution;
            let mut rng = crate::rng::rng_from_seed(21);
            let rows: Vec<Vec<f64>> = (0..60)
                .map(|e| {
                    let z: f64 = rand_distr::StandardNormal.sample(&mut rng);
                    let center = if e % 3 == 0 { -2.5 } else { 2.5 };
                    vec![center + 0.3 * z]
                })
                .collect();
            Ensemble::from_rows(rows, 0).unwrap()
        };
        let y = Observation::new(vec![0.0], vec![2.0]).unwrap();
        let op: Arc<dyn ObservationOperator> = Arc::new(IdentityOperator::new(1));
        let mut cfg = sampling_cfg(FilterKind::McClHmc, 15);
        cfg.chain.burn_in = 0;
        let a = mc_clhmc_analysis(forecast_ens.clone(), &y, op.clone(), &cfg).unwrap();
        let b = mc_clhmc_analysis(forecast_ens, &y, op, &cfg).unwrap();
        for e in 0..60 {
            assert_eq!(a.analysis.member(e).as_slice(), b.analysis.member(e).as_slice());
        }
    }

    #[test]
    fn init_policies() {
        let forecast_ens = ens(&[&[0.0], &[2.0]]);
        let sv = init_chain_position(&forecast_ens, None, InitPolicy::EnsembleMean, None).unwrap();
        assert_relative_eq!(sv.as_slice()[0], 1.0);

        let gmm = GmmParams::diagonal(
            vec![0.2, 0.8],
            vec![vec![-1.0], vec![1.0]],
            vec![vec![0.1], vec![0.1]],
        )
        .unwrap();
        let sv = init_chain_position(
            &forecast_ens,
            Some(&gmm),
            InitPolicy::MaxWeightComponentMean,
            None,
        )
        .unwrap();
        assert_relative_eq!(sv.as_slice()[0], 1.0);

        let y = Observation::new(vec![-1.2], vec![1.0]).unwrap();
        let op = IdentityOperator::new(1);
        let sv = init_chain_position(
            &forecast_ens,
            Some(&gmm),
            InitPolicy::MaxLikelihoodComponentMean,
            Some((&y, &op)),
        )
        .unwrap();
        assert_relative_eq!(sv.as_slice()[0], -1.0);

        assert!(init_chain_position(
            &forecast_ens,
            None,
            InitPolicy::MaxWeightComponentMean,
            None
        )
        .is_err());
    }
}
