//! Gaussian-mixture density estimation of a prior ensemble: EM fitting,
//! AIC/BIC model selection, mixture moments, density evaluation, and sampling.

use std::io::Write;

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::ensemble::{ensemble_covariance, CovarianceEstimate, Ensemble, StateVector};
use crate::error::{Error, Result};
use crate::rng::{derive_seed2, rng_from_seed, tags};

const LN_2PI: f64 = 1.8378770664093453;

/// Parameters of a Gaussian mixture: weights, means, covariances, and cached
/// log-determinants.
#[derive(Debug, Clone)]
pub struct GmmParams {
    weights: Vec<f64>,
    means: Vec<StateVector>,
    covariances: Vec<CovarianceEstimate>,
    log_dets: Vec<f64>,
}

impl GmmParams {
    pub fn new(
        weights: Vec<f64>,
        means: Vec<StateVector>,
        covariances: Vec<CovarianceEstimate>,
    ) -> Result<Self> {
        let n_c = weights.len();
        if n_c == 0 || means.len() != n_c || covariances.len() != n_c {
            return Err(Error::invalid("mixture component counts disagree"));
        }
        if weights.iter().any(|&w| !(w > 0.0)) {
            return Err(Error::invalid("mixture weights must be positive"));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::invalid(format!(
                "mixture weights sum to {sum}, expected 1"
            )));
        }
        let d = means[0].len();
        if means.iter().any(|m| m.len() != d) || covariances.iter().any(|c| c.dim() != d) {
            return Err(Error::invalid("component dimensions disagree"));
        }
        let log_dets = covariances
            .iter()
            .map(log_det)
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            weights,
            means,
            covariances,
            log_dets,
        })
    }

    /// Convenience constructor for diagonal-covariance mixtures.
    pub fn diagonal(weights: Vec<f64>, means: Vec<Vec<f64>>, variances: Vec<Vec<f64>>) -> Result<Self> {
        let means = means
            .into_iter()
            .map(StateVector::new)
            .collect::<Result<Vec<_>>>()?;
        let covariances = variances
            .into_iter()
            .map(CovarianceEstimate::Diagonal)
            .collect();
        Self::new(weights, means, covariances)
    }

    pub fn n_c(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn mean(&self, i: usize) -> &StateVector {
        &self.means[i]
    }

    pub fn covariance(&self, i: usize) -> &CovarianceEstimate {
        &self.covariances[i]
    }

    pub fn log_det(&self, i: usize) -> f64 {
        self.log_dets[i]
    }

    /// log N(x; mu_i, Sigma_i).
    pub fn component_log_pdf(&self, x: &[f64], i: usize) -> Result<f64> {
        let q = quad_form_inv(x, self.means[i].as_slice(), &self.covariances[i])?;
        Ok(-0.5 * (self.dim() as f64 * LN_2PI + self.log_dets[i] + q))
    }

    /// All free parameters of the mixture: (n_c - 1) weights, n_c * d means,
    /// and the covariance entries (d per component when diagonal, d(d+1)/2
    /// when full).
    pub fn free_parameter_count(&self) -> usize {
        let d = self.dim();
        let n_c = self.n_c();
        let cov_params: usize = self
            .covariances
            .iter()
            .map(|c| if c.is_diagonal() { d } else { d * (d + 1) / 2 })
            .sum();
        (n_c - 1) + n_c * d + cov_params
    }

    /// Serialize to the harness golden-file JSON format:
    /// `{"weights":[...],"means":[[...]],"variances":[[...]],"diagonal":true}`.
    pub fn write_json<W: Write>(&self, mut w: W) -> Result<()> {
        let diagonal = self.covariances.iter().all(|c| c.is_diagonal());
        let means: Vec<&[f64]> = self.means.iter().map(|m| m.as_slice()).collect();
        let variances: Vec<Vec<f64>> = self.covariances.iter().map(|c| c.diagonal()).collect();
        let value = if diagonal {
            serde_json::json!({
                "weights": self.weights,
                "means": means,
                "variances": variances,
                "diagonal": true,
            })
        } else {
            let covariances: Vec<Vec<Vec<f64>>> = self
                .covariances
                .iter()
                .map(|c| {
                    let d = c.dim();
                    (0..d)
                        .map(|i| (0..d).map(|j| c.entry(i, j)).collect())
                        .collect()
                })
                .collect();
            serde_json::json!({
                "weights": self.weights,
                "means": means,
                "variances": variances,
                "covariances": covariances,
                "diagonal": false,
            })
        };
        serde_json::to_writer_pretty(&mut w, &value)?;
        writeln!(w)?;
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        #[derive(serde::Deserialize)]
        struct Raw {
            weights: Vec<f64>,
            means: Vec<Vec<f64>>,
            #[serde(default)]
            variances: Vec<Vec<f64>>,
            #[serde(default)]
            covariances: Vec<Vec<Vec<f64>>>,
            diagonal: bool,
        }
        let raw: Raw = serde_json::from_str(text)?;
        if raw.diagonal {
            GmmParams::diagonal(raw.weights, raw.means, raw.variances)
        } else {
            let covariances = raw
                .covariances
                .iter()
                .map(|rows| {
                    let d = rows.len();
                    CovarianceEstimate::Full(DMatrix::from_fn(d, d, |i, j| rows[i][j]))
                })
                .collect();
            let means = raw
                .means
                .into_iter()
                .map(StateVector::new)
                .collect::<Result<Vec<_>>>()?;
            GmmParams::new(raw.weights, means, covariances)
        }
    }
}

fn log_det(c: &CovarianceEstimate) -> Result<f64> {
    match c {
        CovarianceEstimate::Diagonal(d) => {
            if d.iter().any(|&v| !(v > 0.0)) {
                return Err(Error::invalid("component variances must be positive"));
            }
            Ok(d.iter().map(|v| v.ln()).sum())
        }
        CovarianceEstimate::Full(m) => {
            let chol = m
                .clone()
                .cholesky()
                .ok_or_else(|| Error::invalid("component covariance is not positive definite"))?;
            Ok(2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>())
        }
    }
}

/// (x - mu)' Sigma^{-1} (x - mu).
fn quad_form_inv(x: &[f64], mu: &[f64], cov: &CovarianceEstimate) -> Result<f64> {
    if x.len() != mu.len() {
        return Err(Error::DimensionMismatch {
            expected: mu.len(),
            actual: x.len(),
        });
    }
    match cov {
        CovarianceEstimate::Diagonal(var) => Ok(x
            .iter()
            .zip(mu)
            .zip(var)
            .map(|((xi, mi), vi)| {
                let d = xi - mi;
                d * d / vi
            })
            .sum()),
        CovarianceEstimate::Full(m) => {
            let d = DVector::from_iterator(x.len(), x.iter().zip(mu).map(|(a, b)| a - b));
            let chol = m
                .clone()
                .cholesky()
                .ok_or_else(|| Error::invalid("covariance is not positive definite"))?;
            let y = chol.solve(&d);
            Ok(d.dot(&y))
        }
    }
}

fn log_sum_exp(terms: &[f64]) -> f64 {
    let max = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let sum: f64 = terms.iter().map(|t| (t - max).exp()).sum();
    max + sum.ln()
}

/// log of sum_i tau_i N(x; Theta_i), via a stabilized log-sum-exp.
pub fn gmm_log_pdf(x: &[f64], params: &GmmParams) -> Result<f64> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite evaluation point"));
    }
    let terms: Vec<f64> = (0..params.n_c())
        .map(|i| Ok(params.weights[i].ln() + params.component_log_pdf(x, i)?))
        .collect::<Result<Vec<_>>>()?;
    Ok(log_sum_exp(&terms))
}

/// Posterior membership probabilities of each member under each component.
#[derive(Debug, Clone)]
pub struct Responsibilities {
    r: DMatrix<f64>,
    w: Vec<f64>,
}

impl Responsibilities {
    pub fn n_ens(&self) -> usize {
        self.r.nrows()
    }

    pub fn n_c(&self) -> usize {
        self.r.ncols()
    }

    pub fn value(&self, e: usize, i: usize) -> f64 {
        self.r[(e, i)]
    }

    /// Per-component effective counts w_i = sum_e r_{e,i}.
    pub fn effective_counts(&self) -> &[f64] {
        &self.w
    }

    /// argmax responsibility per member.
    pub fn hard_assignments(&self) -> Vec<usize> {
        (0..self.r.nrows())
            .map(|e| {
                let mut best = 0;
                for i in 1..self.r.ncols() {
                    if self.r[(e, i)] > self.r[(e, best)] {
                        best = i;
                    }
                }
                best
            })
            .collect()
    }

    /// Members hard-assigned to each component.
    pub fn hard_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.n_c()];
        for a in self.hard_assignments() {
            counts[a] += 1;
        }
        counts
    }
}

/// E-step: r_{e,i} = tau_i N(x(e); Theta_i) / sum_l tau_l N(x(e); Theta_l),
/// computed in log space. If every component underflows for a member, the
/// member is assigned to the nearest-mean component with r = 1.
pub fn e_step(data: &Ensemble, params: &GmmParams) -> Result<Responsibilities> {
    let n_ens = data.n_ens();
    let n_c = params.n_c();
    let mut r = DMatrix::zeros(n_ens, n_c);
    for e in 0..n_ens {
        let x = data.member(e).as_slice();
        let logs: Vec<f64> = (0..n_c)
            .map(|i| Ok(params.weights[i].ln() + params.component_log_pdf(x, i)?))
            .collect::<Result<Vec<_>>>()?;
        let lse = log_sum_exp(&logs);
        if lse.is_finite() {
            for i in 0..n_c {
                r[(e, i)] = (logs[i] - lse).exp();
            }
        } else {
            let nearest = (0..n_c)
                .min_by(|&a, &b| {
                    let da = sq_dist(x, params.means[a].as_slice());
                    let db = sq_dist(x, params.means[b].as_slice());
                    da.partial_cmp(&db).unwrap()
                })
                .unwrap();
            warn!("e_step: all component densities underflowed for member {e}; hard-assigning to component {nearest}");
            r[(e, nearest)] = 1.0;
        }
    }
    let w = (0..n_c).map(|i| r.column(i).sum()).collect();
    Ok(Responsibilities { r, w })
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// M-step: responsibility-weighted weights, means, and covariances.
/// A component with zero effective weight, or one that collapses to zero
/// variance, yields a degenerate-component error; `em_fit` avoids the latter
/// by flooring variances.
pub fn m_step(data: &Ensemble, resp: &Responsibilities, diagonal_only: bool) -> Result<GmmParams> {
    let (weights, means, covariances) = m_step_raw(data, resp, diagonal_only)?;
    for (i, c) in covariances.iter().enumerate() {
        if log_det(c).is_err() {
            return Err(Error::DegenerateComponent { index: i });
        }
    }
    GmmParams::new(weights, means, covariances)
}

fn m_step_raw(
    data: &Ensemble,
    resp: &Responsibilities,
    diagonal_only: bool,
) -> Result<(Vec<f64>, Vec<StateVector>, Vec<CovarianceEstimate>)> {
    let n_ens = data.n_ens();
    let n_c = resp.n_c();
    let d = data.n_var();
    if resp.n_ens() != n_ens {
        return Err(Error::DimensionMismatch {
            expected: n_ens,
            actual: resp.n_ens(),
        });
    }
    for (i, &wi) in resp.w.iter().enumerate() {
        if !(wi > 0.0) {
            return Err(Error::DegenerateComponent { index: i });
        }
    }

    let weights: Vec<f64> = resp.w.iter().map(|wi| wi / n_ens as f64).collect();

    let mut means = vec![vec![0.0; d]; n_c];
    for e in 0..n_ens {
        let x = data.member(e).as_slice();
        for i in 0..n_c {
            let re = resp.r[(e, i)];
            if re == 0.0 {
                continue;
            }
            for (acc, &xv) in means[i].iter_mut().zip(x) {
                *acc += xv * re;
            }
        }
    }
    for (m, &wi) in means.iter_mut().zip(&resp.w) {
        for v in m.iter_mut() {
            *v /= wi;
        }
    }

    let covariances: Vec<CovarianceEstimate> = if diagonal_only {
        let mut vars = vec![vec![0.0; d]; n_c];
        for e in 0..n_ens {
            let x = data.member(e).as_slice();
            for i in 0..n_c {
                let re = resp.r[(e, i)];
                if re == 0.0 {
                    continue;
                }
                for ((acc, &xv), &mv) in vars[i].iter_mut().zip(x).zip(&means[i]) {
                    let dd = xv - mv;
                    *acc += dd * dd * re;
                }
            }
        }
        vars.into_iter()
            .zip(&resp.w)
            .map(|(mut v, &wi)| {
                for x in v.iter_mut() {
                    *x /= wi;
                }
                CovarianceEstimate::Diagonal(v)
            })
            .collect()
    } else {
        let mut covs = vec![DMatrix::zeros(d, d); n_c];
        for e in 0..n_ens {
            let x = data.member(e).as_slice();
            for i in 0..n_c {
                let re = resp.r[(e, i)];
                if re == 0.0 {
                    continue;
                }
                for a in 0..d {
                    let da = x[a] - means[i][a];
                    for b in a..d {
                        covs[i][(a, b)] += da * (x[b] - means[i][b]) * re;
                    }
                }
            }
        }
        covs.into_iter()
            .zip(&resp.w)
            .map(|(mut c, &wi)| {
                for a in 0..d {
                    for b in a..d {
                        let v = c[(a, b)] / wi;
                        c[(a, b)] = v;
                        c[(b, a)] = v;
                    }
                }
                CovarianceEstimate::Full(c)
            })
            .collect()
    };

    let means = means.into_iter().map(StateVector::from_raw).collect();
    Ok((weights, means, covariances))
}

/// EM configuration. `var_floor` is relative to the per-coordinate variance of
/// the full data set; coordinates whose data variance is zero fall back to
/// `var_floor` as an absolute floor.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmSettings {
    pub max_iter: usize,
    pub rel_tol: f64,
    pub diagonal_only: bool,
    pub var_floor: f64,
    /// Maximum initialization attempts when a run degenerates.
    pub restarts: usize,
}

impl Default for EmSettings {
    fn default() -> Self {
        Self {
            max_iter: 200,
            rel_tol: 1e-6,
            diagonal_only: true,
            var_floor: 1e-8,
            restarts: 3,
        }
    }
}

/// Result of an EM fit.
#[derive(Debug, Clone)]
pub struct EmFit {
    pub params: GmmParams,
    pub responsibilities: Responsibilities,
    pub log_likelihood: f64,
    /// Log-likelihood after initialization and after every iteration.
    pub ll_history: Vec<f64>,
}

fn data_log_likelihood(data: &Ensemble, params: &GmmParams) -> Result<f64> {
    let mut ll = 0.0;
    for m in data.members() {
        ll += gmm_log_pdf(m.as_slice(), params)?;
    }
    Ok(ll)
}

fn floor_covariances(covariances: &mut [CovarianceEstimate], floors: &[f64]) {
    for c in covariances.iter_mut() {
        match c {
            CovarianceEstimate::Diagonal(v) => {
                for (x, f) in v.iter_mut().zip(floors) {
                    if *x < *f {
                        *x = *f;
                    }
                }
            }
            CovarianceEstimate::Full(m) => {
                for (i, f) in floors.iter().enumerate() {
                    if m[(i, i)] < *f {
                        m[(i, i)] = *f;
                    }
                }
            }
        }
    }
}

fn per_coordinate_floors(data: &Ensemble, var_floor: f64) -> Result<Vec<f64>> {
    let overall = ensemble_covariance(data, true)?.diagonal();
    Ok(overall
        .iter()
        .map(|&v| if v > 0.0 { var_floor * v } else { var_floor })
        .collect())
}

fn init_params(
    data: &Ensemble,
    n_c: usize,
    rng: &mut crate::rng::Rng,
    diagonal_only: bool,
    floors: &[f64],
) -> Result<GmmParams> {
    let n_ens = data.n_ens();
    // Equal weights; means drawn from the ensemble, each subsequent draw
    // weighted by the squared distance to the nearest mean already chosen (a
    // plain uniform draw tends to start all means inside one cluster, from
    // where EM stalls on the symmetric plateau); component covariances set to
    // the covariance of the full ensemble.
    let weights = vec![1.0 / n_c as f64; n_c];
    let mut picked: Vec<usize> = vec![rng.random_range(0..n_ens)];
    while picked.len() < n_c {
        let d2: Vec<f64> = (0..n_ens)
            .map(|j| {
                picked
                    .iter()
                    .map(|&p| sq_dist(data.member(j).as_slice(), data.member(p).as_slice()))
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        let total: f64 = d2.iter().sum();
        if total > 0.0 {
            let mut u: f64 = rng.random::<f64>() * total;
            let mut chosen = n_ens - 1;
            for (j, &w) in d2.iter().enumerate() {
                if u < w {
                    chosen = j;
                    break;
                }
                u -= w;
            }
            picked.push(chosen);
        } else {
            // remaining points all coincide with chosen means
            picked.push(rng.random_range(0..n_ens));
        }
    }
    let means: Vec<StateVector> = picked.iter().map(|&j| data.member(j).clone()).collect();
    let base = ensemble_covariance(data, diagonal_only)?;
    let mut covariances = vec![base; n_c];
    floor_covariances(&mut covariances, floors);
    GmmParams::new(weights, means, covariances)
}

/// Fit an `n_c`-component mixture by EM. A run that collapses a component
/// is retried with a fresh random initialization, up to `restarts` attempts.
/// Deterministic given `seed`.
pub fn em_fit(data: &Ensemble, n_c: usize, seed: u64, settings: &EmSettings) -> Result<EmFit> {
    if n_c == 0 {
        return Err(Error::invalid("n_c must be >= 1"));
    }
    if n_c > data.n_ens() {
        return Err(Error::invalid(format!(
            "n_c = {n_c} exceeds ensemble size {}",
            data.n_ens()
        )));
    }
    if settings.max_iter == 0 {
        return Err(Error::invalid("max_iter must be >= 1"));
    }
    let floors = per_coordinate_floors(data, settings.var_floor)?;
    let restarts = settings.restarts.max(1);
    let mut last_err = None;
    for restart in 0..restarts {
        let mut rng = rng_from_seed(derive_seed2(seed, tags::GMM_FIT, restart as u64));
        match em_single_run(data, n_c, &mut rng, settings, &floors) {
            Ok(fit) => return Ok(fit),
            Err(e) => {
                warn!("EM restart {restart} for n_c={n_c} failed: {e}");
                last_err = Some(e);
            }
        }
    }
    Err(Error::FitFailure(format!(
        "all {restarts} EM restarts for n_c={n_c} failed: {}",
        last_err.map(|e| e.to_string()).unwrap_or_default()
    )))
}

fn em_single_run(
    data: &Ensemble,
    n_c: usize,
    rng: &mut crate::rng::Rng,
    settings: &EmSettings,
    floors: &[f64],
) -> Result<EmFit> {
    let mut params = init_params(data, n_c, rng, settings.diagonal_only, floors)?;
    let mut ll = data_log_likelihood(data, &params)?;
    let mut history = vec![ll];
    let mut resp = e_step(data, &params)?;
    for _ in 0..settings.max_iter {
        let (weights, means, mut covariances) =
            m_step_raw(data, &resp, settings.diagonal_only)?;
        floor_covariances(&mut covariances, floors);
        params = GmmParams::new(weights, means, covariances)?;
        let new_ll = data_log_likelihood(data, &params)?;
        history.push(new_ll);
        resp = e_step(data, &params)?;
        let delta = (new_ll - ll).abs();
        ll = new_ll;
        if delta < settings.rel_tol * ll.abs().max(1.0) {
            break;
        }
    }
    Ok(EmFit {
        params,
        responsibilities: resp,
        log_likelihood: ll,
        ll_history: history,
    })
}

/// Penalized-likelihood model selection criteria.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Criterion {
    Aic,
    Bic,
}

/// AIC = -2 LL + 2 k, BIC = -2 LL + ln(n_ens) k, with k the number of free
/// mixture parameters. For one-dimensional diagonal mixtures k reduces to
/// 3 n_c - 1.
pub fn criterion_value(params: &GmmParams, data: &Ensemble, kind: Criterion) -> Result<f64> {
    let ll = data_log_likelihood(data, params)?;
    let k = params.free_parameter_count() as f64;
    Ok(match kind {
        Criterion::Aic => -2.0 * ll + 2.0 * k,
        Criterion::Bic => -2.0 * ll + (data.n_ens() as f64).ln() * k,
    })
}

/// One candidate fit within a model-selection sweep.
#[derive(Debug, Clone)]
pub struct CandidateFit {
    pub n_c: usize,
    pub criterion: f64,
    pub log_likelihood: f64,
    /// Smallest hard-assigned member count across components.
    pub min_hard_count: usize,
    /// Candidate discarded by the membership lower bound.
    pub excluded: bool,
    pub fit: EmFit,
}

/// Report of an AIC/BIC sweep over candidate component counts.
#[derive(Debug, Clone)]
pub struct ModelSelectionReport {
    pub criterion: Criterion,
    pub candidates: Vec<CandidateFit>,
    pub selected_n_c: usize,
}

impl ModelSelectionReport {
    pub fn selected(&self) -> &CandidateFit {
        self.candidates
            .iter()
            .find(|c| c.n_c == self.selected_n_c)
            .expect("selected candidate present")
    }

    pub fn write_json<W: Write>(&self, mut w: W) -> Result<()> {
        let candidates: Vec<serde_json::Value> = self
            .candidates
            .iter()
            .map(|c| {
                serde_json::json!({
                    "n_c": c.n_c,
                    "criterion": c.criterion,
                    "log_likelihood": c.log_likelihood,
                    "min_hard_count": c.min_hard_count,
                    "excluded": c.excluded,
                })
            })
            .collect();
        let value = serde_json::json!({
            "criterion": match self.criterion { Criterion::Aic => "aic", Criterion::Bic => "bic" },
            "selected_n_c": self.selected_n_c,
            "candidates": candidates,
        });
        serde_json::to_writer_pretty(&mut w, &value)?;
        writeln!(w)?;
        Ok(())
    }
}

/// Fit every candidate component count and pick the criterion minimizer among
/// candidates whose components all hold at least `min_members` hard-assigned
/// members. Falls back to a single component when every candidate is
/// discarded. Exact criterion ties resolve to the smallest n_c.
pub fn select_model(
    data: &Ensemble,
    candidates: &[usize],
    criterion: Criterion,
    min_members: usize,
    seed: u64,
    settings: &EmSettings,
) -> Result<ModelSelectionReport> {
    if candidates.is_empty() {
        return Err(Error::invalid("candidate list must be nonempty"));
    }
    if min_members == 0 {
        return Err(Error::invalid("min_members must be >= 1"));
    }
    let mut fits = Vec::new();
    for &n_c in candidates {
        if n_c == 0 || n_c > data.n_ens() {
            continue;
        }
        let fit = match em_fit(data, n_c, derive_seed2(seed, tags::GMM_FIT, n_c as u64), settings) {
            Ok(f) => f,
            Err(e) => {
                warn!("model selection: n_c={n_c} fit failed: {e}");
                continue;
            }
        };
        let crit = criterion_value(&fit.params, data, criterion)?;
        let min_hard = fit
            .responsibilities
            .hard_counts()
            .into_iter()
            .min()
            .unwrap_or(0);
        fits.push(CandidateFit {
            n_c,
            criterion: crit,
            log_likelihood: fit.log_likelihood,
            min_hard_count: min_hard,
            excluded: min_hard < min_members,
            fit,
        });
    }

    let selected_n_c = fits
        .iter()
        .filter(|c| !c.excluded)
        .min_by(|a, b| {
            a.criterion
                .partial_cmp(&b.criterion)
                .unwrap()
                .then(a.n_c.cmp(&b.n_c))
        })
        .map(|c| c.n_c);

    let selected_n_c = match selected_n_c {
        Some(n) => n,
        None => {
            // Everything discarded: fall back to a single component.
            if !fits.iter().any(|c| c.n_c == 1) {
                let fit = em_fit(data, 1, derive_seed2(seed, tags::GMM_FIT, 1), settings)?;
                let crit = criterion_value(&fit.params, data, criterion)?;
                fits.push(CandidateFit {
                    n_c: 1,
                    criterion: crit,
                    log_likelihood: fit.log_likelihood,
                    min_hard_count: data.n_ens(),
                    excluded: false,
                    fit,
                });
            }
            1
        }
    };

    Ok(ModelSelectionReport {
        criterion,
        candidates: fits,
        selected_n_c,
    })
}

/// Mixture mean and covariance: mean = sum tau_i mu_i and
/// cov = sum tau_i Sigma_i + sum tau_i (mu_i - mean)(mu_i - mean)'.
pub fn gmm_joint_moments(params: &GmmParams) -> (StateVector, CovarianceEstimate) {
    let d = params.dim();
    let n_c = params.n_c();
    if n_c == 1 {
        return (params.means[0].clone(), params.covariances[0].clone());
    }
    let mut mean = vec![0.0; d];
    for i in 0..n_c {
        for (acc, &m) in mean.iter_mut().zip(params.means[i].as_slice()) {
            *acc += params.weights[i] * m;
        }
    }
    let mut cov = DMatrix::zeros(d, d);
    for i in 0..n_c {
        let tau = params.weights[i];
        match &params.covariances[i] {
            CovarianceEstimate::Diagonal(v) => {
                for (a, &va) in v.iter().enumerate() {
                    cov[(a, a)] += tau * va;
                }
            }
            CovarianceEstimate::Full(m) => {
                for a in 0..d {
                    for b in 0..d {
                        cov[(a, b)] += tau * m[(a, b)];
                    }
                }
            }
        }
        let mu = params.means[i].as_slice();
        for a in 0..d {
            let da = mu[a] - mean[a];
            for b in 0..d {
                cov[(a, b)] += tau * da * (mu[b] - mean[b]);
            }
        }
    }
    (StateVector::from_raw(mean), CovarianceEstimate::Full(cov))
}

/// Draw `n` samples: a component index from the weights, then a Gaussian draw
/// from that component. Deterministic given `seed`.
pub fn sample_gmm(params: &GmmParams, n: usize, seed: u64) -> Result<Ensemble> {
    if n == 0 {
        return Err(Error::invalid("sample count must be >= 1"));
    }
    let mut rng = rng_from_seed(seed);
    let d = params.dim();
    // Pre-factor full covariances once.
    let factors: Vec<Option<DMatrix<f64>>> = params
        .covariances
        .iter()
        .map(|c| match c {
            CovarianceEstimate::Diagonal(_) => Ok(None),
            CovarianceEstimate::Full(m) => m
                .clone()
                .cholesky()
                .map(|ch| Some(ch.l()))
                .ok_or_else(|| Error::invalid("component covariance is not positive definite")),
        })
        .collect::<Result<Vec<_>>>()?;

    let mut rows = Vec::with_capacity(n);
    for _ in 0..n {
        let u: f64 = rng.random();
        let mut i = 0;
        let mut acc = 0.0;
        for (j, &w) in params.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                i = j;
                break;
            }
            i = j;
        }
        let z: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let mu = params.means[i].as_slice();
        let row: Vec<f64> = match (&params.covariances[i], &factors[i]) {
            (CovarianceEstimate::Diagonal(var), _) => mu
                .iter()
                .zip(&z)
                .zip(var)
                .map(|((m, zz), v)| m + zz * v.sqrt())
                .collect(),
            (CovarianceEstimate::Full(_), Some(l)) => {
                let lz = l * DVector::from_column_slice(&z);
                mu.iter().zip(lz.iter()).map(|(m, s)| m + s).collect()
            }
            _ => unreachable!(),
        };
        rows.push(row);
    }
    Ensemble::from_rows(rows, 0)
}
