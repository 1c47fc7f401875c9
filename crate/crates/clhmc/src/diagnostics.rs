//! Evaluation metrics: RMSE, rank histograms, chi-square QQ data, and
//! goodness-of-fit helpers.

use std::io::Write;

use log::warn;
use nalgebra::DMatrix;
use rand::Rng as _;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::ensemble::{ensemble_anomalies, Ensemble, StateVector};
use crate::error::{Error, Result};
use crate::rng::rng_from_seed;

/// Root mean squared error sqrt(sum (x_i - truth_i)^2 / n_var).
pub fn rmse(x: &StateVector, truth: &StateVector) -> Result<f64> {
    if x.len() != truth.len() {
        return Err(Error::DimensionMismatch {
            expected: truth.len(),
            actual: x.len(),
        });
    }
    let ss: f64 = x
        .as_slice()
        .iter()
        .zip(truth.as_slice())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok((ss / x.len() as f64).sqrt())
}

/// Rank of the truth among ensemble members at every `stride`-th variable:
/// the count of members strictly below the truth value, with ties counted
/// below with probability 1/2 (seeded).
pub fn rank_of_truth(
    ens: &Ensemble,
    truth: &StateVector,
    variable_stride: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    if variable_stride == 0 {
        return Err(Error::invalid("variable stride must be >= 1"));
    }
    if truth.len() != ens.n_var() {
        return Err(Error::DimensionMismatch {
            expected: ens.n_var(),
            actual: truth.len(),
        });
    }
    let mut rng = rng_from_seed(seed);
    let mut ranks = Vec::new();
    let mut j = 0;
    while j < ens.n_var() {
        let t = truth[j];
        let mut below = 0usize;
        for m in ens.members() {
            let v = m[j];
            if v < t || (v == t && rng.random::<bool>()) {
                below += 1;
            }
        }
        ranks.push(below);
        j += variable_stride;
    }
    Ok(ranks)
}

/// Binned counts of truth ranks accumulated over cycles.
#[derive(Debug, Clone, serde::Serialize)]
pub struct RankHistogram {
    pub bins: Vec<usize>,
    pub variable_stride: usize,
    pub cycles: usize,
}

impl RankHistogram {
    pub fn new(n_ens: usize, variable_stride: usize) -> Self {
        Self {
            bins: vec![0; n_ens + 1],
            variable_stride,
            cycles: 0,
        }
    }

    /// Add one cycle's ranks.
    pub fn accumulate(&mut self, ranks: &[usize]) -> Result<()> {
        for &r in ranks {
            if r >= self.bins.len() {
                return Err(Error::invalid(format!(
                    "rank {r} outside [0, {}]",
                    self.bins.len() - 1
                )));
            }
            self.bins[r] += 1;
        }
        self.cycles += 1;
        Ok(())
    }

    pub fn total(&self) -> usize {
        self.bins.iter().sum()
    }

    /// Chi-square goodness-of-fit p-value against the uniform distribution.
    pub fn uniformity_p_value(&self) -> Result<f64> {
        let total = self.total();
        if total == 0 {
            return Err(Error::invalid("empty rank histogram"));
        }
        let k = self.bins.len();
        let expected = total as f64 / k as f64;
        let stat: f64 = self
            .bins
            .iter()
            .map(|&o| {
                let d = o as f64 - expected;
                d * d / expected
            })
            .sum();
        let dist = ChiSquared::new((k - 1) as f64)
            .map_err(|e| Error::invalid(format!("chi-squared dof: {e}")))?;
        Ok(1.0 - dist.cdf(stat))
    }

    pub fn write_json<W: Write>(&self, mut w: W) -> Result<()> {
        serde_json::to_writer_pretty(&mut w, self)?;
        writeln!(w)?;
        Ok(())
    }
}

/// Build a rank histogram directly from per-cycle rank lists.
pub fn accumulate_rank_histogram(
    ranks_per_cycle: &[Vec<usize>],
    n_ens: usize,
    variable_stride: usize,
) -> Result<RankHistogram> {
    let mut hist = RankHistogram::new(n_ens, variable_stride);
    for ranks in ranks_per_cycle {
        hist.accumulate(ranks)?;
    }
    Ok(hist)
}

/// Sorted squared Mahalanobis distances of ensemble members paired with
/// chi-square quantiles at plotting positions (i - 1/2) / n_ens.
#[derive(Debug, Clone, serde::Serialize)]
pub struct QqData {
    pub distances: Vec<f64>,
    pub quantiles: Vec<f64>,
    pub dof: f64,
}

impl QqData {
    pub fn write_json<W: Write>(&self, mut w: W) -> Result<()> {
        serde_json::to_writer_pretty(&mut w, self)?;
        writeln!(w)?;
        Ok(())
    }
}

/// Largest state dimension for which the full (localized) covariance is
/// factored; beyond it distances fall back to the diagonal covariance.
const QQ_FULL_DIM_LIMIT: usize = 8192;

/// Squared Mahalanobis distances of the members from the ensemble mean under
/// the localized (or, at large dimension, diagonal) sample covariance, paired
/// with chi-square quantiles.
///
/// With fewer members than state variables the raw sample covariance is
/// singular; localization (Gaspari-Cohn on the index/grid distance) restores
/// invertibility and the chi-square reference uses n_ens - 1 degrees of
/// freedom, the ensemble's intrinsic dimension. A singular covariance after
/// localization falls back to the floored diagonal with a warning.
pub fn chi_square_qq(
    ens: &Ensemble,
    localization_radius: Option<f64>,
    distance: Option<&dyn Fn(usize, usize) -> f64>,
) -> Result<QqData> {
    let n_ens = ens.n_ens();
    if n_ens < 2 {
        return Err(Error::invalid("QQ data needs n_ens >= 2"));
    }
    let d = ens.n_var();
    let (_, anomalies) = ensemble_anomalies(ens);

    let full_rank = n_ens > d;
    let dof = if full_rank { d as f64 } else { (n_ens - 1) as f64 };

    let distances = if d <= QQ_FULL_DIM_LIMIT {
        full_covariance_distances(&anomalies, n_ens, d, localization_radius, distance)
    } else {
        diagonal_distances(&anomalies, n_ens, d)
    };

    let mut order: Vec<usize> = (0..n_ens).collect();
    order.sort_by(|&a, &b| distances[a].partial_cmp(&distances[b]).unwrap());
    let sorted: Vec<f64> = order.iter().map(|&i| distances[i]).collect();

    let dist = ChiSquared::new(dof.max(1.0))
        .map_err(|e| Error::invalid(format!("chi-squared dof: {e}")))?;
    let quantiles: Vec<f64> = (0..n_ens)
        .map(|i| dist.inverse_cdf((i as f64 + 0.5) / n_ens as f64))
        .collect();

    Ok(QqData {
        distances: sorted,
        quantiles,
        dof,
    })
}

fn full_covariance_distances(
    anomalies: &[Vec<f64>],
    n_ens: usize,
    d: usize,
    radius: Option<f64>,
    distance: Option<&dyn Fn(usize, usize) -> f64>,
) -> Vec<f64> {
    let scale = 1.0 / (n_ens as f64 - 1.0);
    let mut cov = DMatrix::zeros(d, d);
    for a in anomalies {
        for i in 0..d {
            for j in i..d {
                cov[(i, j)] += a[i] * a[j] * scale;
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            let v = cov[(i, j)];
            cov[(j, i)] = v;
        }
    }
    if let Some(r) = radius {
        let index_distance = |i: usize, j: usize| (i as f64 - j as f64).abs();
        for i in 0..d {
            for j in 0..d {
                let dd = match distance {
                    Some(f) => f(i, j),
                    None => index_distance(i, j),
                };
                let w = crate::ensemble::gaspari_cohn(dd, r).unwrap_or(0.0);
                cov[(i, j)] *= w;
            }
        }
    }
    // small relative jitter keeps well-conditioned cases unaffected
    let trace: f64 = (0..d).map(|i| cov[(i, i)]).sum();
    let jitter = 1e-10 * (trace / d as f64).max(1e-300);
    for i in 0..d {
        cov[(i, i)] += jitter;
    }
    match cov.clone().cholesky() {
        Some(ch) => anomalies
            .iter()
            .map(|a| {
                let v = nalgebra::DVector::from_column_slice(a);
                v.dot(&ch.solve(&v))
            })
            .collect(),
        None => {
            warn!("chi_square_qq: localized covariance is singular; falling back to diagonal");
            diagonal_distances(anomalies, n_ens, d)
        }
    }
}

fn diagonal_distances(anomalies: &[Vec<f64>], n_ens: usize, d: usize) -> Vec<f64> {
    let scale = 1.0 / (n_ens as f64 - 1.0);
    let mut var = vec![0.0; d];
    for a in anomalies {
        for (vi, ai) in var.iter_mut().zip(a) {
            *vi += ai * ai * scale;
        }
    }
    let max_var = var.iter().cloned().fold(0.0f64, f64::max);
    if max_var == 0.0 {
        // all members identical: degenerate distances are zero
        return vec![0.0; n_ens];
    }
    let floor = 1e-12 * max_var;
    anomalies
        .iter()
        .map(|a| {
            a.iter()
                .zip(&var)
                .map(|(ai, vi)| ai * ai / vi.max(floor))
                .sum()
        })
        .collect()
}

/// One-sample Kolmogorov-Smirnov statistic against a reference CDF.
pub fn ks_statistic<F: Fn(f64) -> f64>(samples: &[f64], cdf: F) -> f64 {
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len() as f64;
    let mut d = 0.0f64;
    for (i, x) in sorted.iter().enumerate() {
        let f = cdf(*x);
        let lo = i as f64 / n;
        let hi = (i + 1) as f64 / n;
        d = d.max((f - lo).abs()).max((hi - f).abs());
    }
    d
}

/// Append one row of the metrics time series
/// `cycle,rmse_forecast,rmse_analysis,acceptance_rate`.
pub fn write_metrics_row<W: Write>(
    mut w: W,
    cycle: usize,
    rmse_forecast: f64,
    rmse_analysis: f64,
    acceptance_rate: Option<f64>,
) -> Result<()> {
    match acceptance_rate {
        Some(r) => writeln!(w, "{cycle},{rmse_forecast},{rmse_analysis},{r}")?,
        None => writeln!(w, "{cycle},{rmse_forecast},{rmse_analysis},")?,
    }
    Ok(())
}

pub const METRICS_HEADER: &str = "cycle,rmse_forecast,rmse_analysis,acceptance_rate";
