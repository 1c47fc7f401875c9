//! Deterministic EnKF baseline: Kalman mean update with half-gain anomaly
//! update, Gaspari-Cohn localization of the sample covariance, and
//! multiplicative inflation of the analysis anomalies.

use std::time::Instant;

use log::warn;
use nalgebra::{DMatrix, DVector};

use crate::ensemble::{ensemble_anomalies, gaspari_cohn, inflate, Ensemble, Observation, StateVector};
use crate::error::{Error, Result};
use crate::potentials::ObservationOperator;

use super::{CycleResult, CycleTimings, FilterConfig};

/// DEnKF analysis for a linear observation operator:
///
///   mean:      xa = xf + K (y - H xf),  K = B_loc H' (H B_loc H' + R)^{-1}
///   anomalies: Aa = Af - 1/2 K H Af
///
/// with B_loc the Gaspari-Cohn-localized sample covariance, followed by
/// multiplicative inflation of the analysis anomalies. The covariance is
/// never formed: B H' and H B H' are assembled from the anomalies and the
/// observed rows, localized entrywise through the configured distance.
pub fn denkf_analysis(
    forecast: Ensemble,
    y: &Observation,
    op: &dyn ObservationOperator,
    cfg: &FilterConfig,
) -> Result<CycleResult> {
    let started = Instant::now();
    let n_ens = forecast.n_ens();
    let n_var = forecast.n_var();
    let m = y.m_obs();
    if n_ens < 2 {
        return Err(Error::invalid("DEnKF needs n_ens >= 2"));
    }

    let (mean, anomalies) = ensemble_anomalies(&forecast);

    // observed anomalies via linearity: H(member) - H(mean)
    let h_mean = op.apply(mean.as_slice());
    if h_mean.len() != m {
        return Err(Error::DimensionMismatch {
            expected: m,
            actual: h_mean.len(),
        });
    }
    let h_anoms: Vec<Vec<f64>> = forecast
        .members()
        .iter()
        .map(|mem| {
            op.apply(mem.as_slice())
                .iter()
                .zip(&h_mean)
                .map(|(a, b)| a - b)
                .collect()
        })
        .collect();

    let scale = 1.0 / (n_ens as f64 - 1.0);

    // localization weights need observation locations in state-index space
    let obs_indices = op.gather_indices();
    let localize = match (cfg.denkf.localization_radius, obs_indices) {
        (Some(r), Some(idx)) => Some((r, idx)),
        (Some(_), None) => {
            warn!("DEnKF: localization requested but the operator exposes no state indices; skipping localization");
            None
        }
        (None, _) => None,
    };
    let distance = |i: usize, j: usize| -> f64 {
        match &cfg.denkf.distance {
            Some(f) => f(i, j),
            None => (i as f64 - j as f64).abs(),
        }
    };

    // B H' (n_var x m), localized entrywise
    let mut bht = DMatrix::<f64>::zeros(n_var, m);
    for e in 0..n_ens {
        let a = &anomalies[e];
        let ha = &h_anoms[e];
        for (j, haj) in ha.iter().enumerate() {
            if *haj == 0.0 {
                continue;
            }
            let w = haj * scale;
            for i in 0..n_var {
                bht[(i, j)] += a[i] * w;
            }
        }
    }
    if let Some((radius, idx)) = localize {
        for j in 0..m {
            for i in 0..n_var {
                let rho = gaspari_cohn(distance(i, idx[j]), radius)?;
                bht[(i, j)] *= rho;
            }
        }
    }

    // S = H B_loc H' + R (m x m)
    let mut s = DMatrix::zeros(m, m);
    for ha in &h_anoms {
        for j in 0..m {
            let w = ha[j] * scale;
            if w == 0.0 {
                continue;
            }
            for k in j..m {
                s[(j, k)] += w * ha[k];
            }
        }
    }
    for j in 0..m {
        for k in j..m {
            let mut v = s[(j, k)];
            if let Some((radius, idx)) = localize {
                v *= gaspari_cohn(distance(idx[j], idx[k]), radius)?;
            }
            s[(j, k)] = v;
            s[(k, j)] = v;
        }
    }
    for j in 0..m {
        s[(j, j)] += y.error_variances[j];
    }

    // factor S, regularizing if sampling noise breaks positive definiteness
    let chol = match s.clone().cholesky() {
        Some(c) => c,
        None => {
            let trace: f64 = (0..m).map(|j| s[(j, j)]).sum();
            let jitter = 1e-8 * (trace / m as f64).max(1e-300);
            warn!("DEnKF: innovation matrix singular; regularizing with jitter {jitter:.3e}");
            for j in 0..m {
                s[(j, j)] += jitter;
            }
            s.clone()
                .cholesky()
                .ok_or_else(|| Error::invalid("innovation matrix remains singular"))?
        }
    };

    // mean update
    let innovation =
        DVector::from_iterator(m, y.values.iter().zip(&h_mean).map(|(yv, hv)| yv - hv));
    let z = chol.solve(&innovation);
    let mut analysis_mean = mean.as_slice().to_vec();
    for i in 0..n_var {
        let mut dot = 0.0;
        for j in 0..m {
            dot += bht[(i, j)] * z[j];
        }
        analysis_mean[i] += dot;
    }

    // anomaly update: Aa_e = Af_e - 1/2 K (H Af_e)
    let mut members = Vec::with_capacity(n_ens);
    for e in 0..n_ens {
        let t = chol.solve(&DVector::from_column_slice(&h_anoms[e]));
        let mut row = Vec::with_capacity(n_var);
        for i in 0..n_var {
            let mut dot = 0.0;
            for j in 0..m {
                dot += bht[(i, j)] * t[j];
            }
            row.push(analysis_mean[i] + anomalies[e][i] - 0.5 * dot);
        }
        members.push(StateVector::new(row)?);
    }
    let analysis = Ensemble::new(members, forecast.time_index())?;
    let analysis = if cfg.denkf.inflation > 1.0 {
        inflate(&analysis, cfg.denkf.inflation)?
    } else {
        analysis
    };

    Ok(CycleResult {
        forecast,
        analysis,
        gmm_report: None,
        chain_stats: Vec::new(),
        timings: CycleTimings {
            analysis_secs: started.elapsed().as_secs_f64(),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensemble::ensemble_mean;
    use crate::filters::{FilterKind, FilterConfig};
    use crate::hmc::{Integrator, TrajectoryParams};
    use crate::potentials::IdentityOperator;
    use approx::assert_relative_eq;

    fn cfg_no_tuning(seed: u64) -> FilterConfig {
        let mut cfg = FilterConfig::new(
            FilterKind::Denkf,
            TrajectoryParams::new(0.1, 1, Integrator::Verlet).unwrap(),
            seed,
        );
        cfg.denkf.localization_radius = None;
        cfg.denkf.inflation = 1.0;
        cfg
    }

    /// Two members at +-1/sqrt(2) around 0: sample variance exactly 1.
    fn scalar_forecast() -> Ensemble {
        let a = 1.0 / 2.0f64.sqrt();
        Ensemble::from_rows(vec![vec![-a], vec![a]], 0).unwrap()
    }

    #[test]
    fn scalar_kalman_update() {
        let forecast_ens = scalar_forecast();
        let y = Observation::new(vec![2.0], vec![1.0]).unwrap();
        let op = IdentityOperator::new(1);
        let cfg = cfg_no_tuning(0);
        let out = denkf_analysis(forecast_ens, &y, &op, &cfg).unwrap();

        // K = 1/(1+1) = 1/2: mean 0 -> 1; anomalies scaled by 1 - K/2 = 0.75
        let mean = ensemble_mean(&out.analysis).as_slice()[0];
        assert_relative_eq!(mean, 1.0, epsilon = 1e-12);
        let a = 1.0 / 2.0f64.sqrt();
        assert_relative_eq!(out.analysis.member(0).as_slice()[0], 1.0 - 0.75 * a, epsilon = 1e-12);
        assert_relative_eq!(out.analysis.member(1).as_slice()[0], 1.0 + 0.75 * a, epsilon = 1e-12);
    }

    #[test]
    fn infinite_noise_keeps_forecast() {
        let forecast_ens = scalar_forecast();
        let y = Observation::new(vec![5.0], vec![1e12]).unwrap();
        let op = IdentityOperator::new(1);
        let cfg = cfg_no_tuning(0);
        let out = denkf_analysis(forecast_ens.clone(), &y, &op, &cfg).unwrap();
        for e in 0..2 {
            assert_relative_eq!(
                out.analysis.member(e).as_slice()[0],
                forecast_ens.member(e).as_slice()[0],
                epsilon = 1e-9
            );
        }
    }

    #[test]
    fn exact_observation_of_mean_contracts_spread() {
        let forecast_ens = scalar_forecast();
        let y = Observation::new(vec![0.0], vec![1.0]).unwrap();
        let op = IdentityOperator::new(1);
        let cfg = cfg_no_tuning(0);
        let out = denkf_analysis(forecast_ens.clone(), &y, &op, &cfg).unwrap();
        let mean = ensemble_mean(&out.analysis).as_slice()[0];
        assert_relative_eq!(mean, 0.0, epsilon = 1e-12);
        let spread_before = forecast_ens.member(1).as_slice()[0];
        let spread_after = out.analysis.member(1).as_slice()[0];
        assert!(spread_after < spread_before);
    }

    #[test]
    fn localization_zeroes_distant_impact() {
        // three variables, observe only index 0; variables perfectly
        // correlated in the sample, but index 2 is beyond the support
        let rows = vec![vec![1.0, 1.0, 1.0], vec![-1.0, -1.0, -1.0]];
        let forecast_ens = Ensemble::from_rows(rows, 0).unwrap();
        let op = crate::qg::LinearGatherOperator::new(3, vec![0]).unwrap();
        let y = Observation::new(vec![3.0], vec![0.5]).unwrap();
        let mut cfg = cfg_no_tuning(0);
        cfg.denkf.localization_radius = Some(0.9); // support 1.8 < 2
        let out = denkf_analysis(forecast_ens.clone(), &y, &op, &cfg).unwrap();
        let mean = ensemble_mean(&out.analysis);
        assert!(mean.as_slice()[0] > 0.5, "observed variable updated");
        assert_relative_eq!(mean.as_slice()[2], 0.0, epsilon = 1e-12); // beyond 2 * radius
        // inflation preserves the mean exactly
        let mut cfg_inf = cfg.clone();
        cfg_inf.denkf.inflation = 1.06;
        let out_inf = denkf_analysis(forecast_ens, &y, &op, &cfg_inf).unwrap();
        for i in 0..3 {
            assert_relative_eq!(
                ensemble_mean(&out_inf.analysis).as_slice()[i],
                mean.as_slice()[i],
                epsilon = 1e-12
            );
        }
    }
}
