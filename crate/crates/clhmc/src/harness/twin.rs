//! QG twin experiment: spin up a truth run, draw an exchangeable initial
//! ensemble, synthesize noisy observations from the truth, and spin the
//! forecast/analysis loop for the configured filter.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand_distr::Distribution;

use crate::diagnostics::{
    chi_square_qq, rank_of_truth, rmse, write_metrics_row, RankHistogram, METRICS_HEADER,
};
use crate::ensemble::{ensemble_mean, Ensemble, Observation, StateVector};
use crate::error::{Error, Result};
use crate::filters::{
    analysis_step, forecast, DistanceFn, FilterConfig, FilterKind, ModelPropagator,
};
use crate::potentials::ObservationOperator;
use crate::qg::{linear_obs_operator, wind_magnitude_operator, write_qg1, QgGrid, QgModel};
use crate::rng::{derive_seed, derive_seed2, rng_from_seed, tags};

use super::config::{ExperimentConfig, ModelKind, ObservationKind};
use super::manifest::{CycleRecord, RunManifest};

/// Smooth random field: white noise on the interior, `passes` rounds of
/// five-point averaging, rescaled so the interior RMS equals `amplitude`.
pub fn smooth_perturbation(grid: &QgGrid, seed: u64, passes: usize, amplitude: f64) -> Vec<f64> {
    let mut rng = rng_from_seed(seed);
    let (nx, ny) = (grid.nx, grid.ny);
    let mut field = vec![0.0; nx * ny];
    for iy in 1..ny - 1 {
        for ix in 1..nx - 1 {
            field[iy * nx + ix] = rand_distr::StandardNormal.sample(&mut rng);
        }
    }
    let mut work = field.clone();
    for _ in 0..passes {
        for iy in 1..ny - 1 {
            for ix in 1..nx - 1 {
                let i = iy * nx + ix;
                work[i] =
                    0.5 * field[i] + 0.125 * (field[i - 1] + field[i + 1] + field[i - nx] + field[i + nx]);
            }
        }
        std::mem::swap(&mut field, &mut work);
        grid.enforce_boundary(&mut field);
    }
    let n_int = ((nx - 2) * (ny - 2)) as f64;
    let rms = (field.iter().map(|v| v * v).sum::<f64>() / n_int).sqrt();
    if rms > 0.0 {
        let scale = amplitude / rms;
        for v in &mut field {
            *v *= scale;
        }
    }
    field
}

fn add_fields(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

/// Truth trajectory and exchangeable initial ensemble: the truth and every
/// member are the spun-up state plus independent smooth perturbations of the
/// same amplitude.
pub struct TwinSetup {
    pub model: Arc<QgModel>,
    pub truth0: StateVector,
    pub initial_ensemble: Ensemble,
}

pub fn build_twin_setup(cfg: &ExperimentConfig) -> Result<TwinSetup> {
    let grid = QgGrid::new(cfg.qg.nx, cfg.qg.ny)?;
    let model = QgModel::new(grid, cfg.qg.params)?;
    let seed = cfg.experiment.seed;

    let base = model.advance_psi(&vec![0.0; grid.n_var()], cfg.qg.spinup_steps)?;

    let truth_pert = smooth_perturbation(
        &grid,
        derive_seed(seed, tags::TRUTH_PERTURBATION),
        cfg.qg.smoothing_passes,
        cfg.qg.init_spread,
    );
    let truth0 = StateVector::new(add_fields(&base, &truth_pert))?;

    let members = (0..cfg.experiment.n_ens)
        .map(|e| {
            let pert = smooth_perturbation(
                &grid,
                derive_seed2(seed, tags::INIT_ENSEMBLE, e as u64),
                cfg.qg.smoothing_passes,
                cfg.qg.init_spread,
            );
            StateVector::new(add_fields(&base, &pert))
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(TwinSetup {
        model: Arc::new(model),
        truth0,
        initial_ensemble: Ensemble::new(members, 0)?,
    })
}

/// Build the cycle's observation operator; the network offset reseeds from
/// (master seed, cycle) when `offset_per_cycle` is set.
pub fn build_observation_operator(
    cfg: &ExperimentConfig,
    grid: &QgGrid,
    cycle: usize,
) -> Result<Arc<dyn ObservationOperator>> {
    let tag = if cfg.observations.offset_per_cycle {
        cycle as u64
    } else {
        0
    };
    let seed = derive_seed2(cfg.experiment.seed, tags::OBS_NETWORK, tag);
    Ok(match cfg.observations.kind {
        ObservationKind::Linear => {
            Arc::new(linear_obs_operator(grid, cfg.observations.m_obs, seed)?)
        }
        ObservationKind::WindMagnitude => {
            Arc::new(wind_magnitude_operator(grid, cfg.observations.m_obs, seed)?)
        }
    })
}

/// Synthesize the cycle's observation: apply the operator to the truth and
/// add white noise with the configured variance.
pub fn synthesize_observation(
    cfg: &ExperimentConfig,
    op: &dyn ObservationOperator,
    truth: &StateVector,
    cycle: usize,
) -> Result<Observation> {
    let mut rng = rng_from_seed(derive_seed2(
        cfg.experiment.seed,
        tags::OBS_NOISE,
        cycle as u64,
    ));
    let std = cfg.observations.variance.sqrt();
    let values: Vec<f64> = op
        .apply(truth.as_slice())
        .into_iter()
        .map(|v| {
            let z: f64 = rand_distr::StandardNormal.sample(&mut rng);
            v + std * z
        })
        .collect();
    Observation::with_constant_variance(values, cfg.observations.variance)
}

/// Per-cycle filter configuration with the analysis seed derived from
/// (master seed, cycle).
pub fn filter_config_for_cycle(cfg: &ExperimentConfig, cycle: usize) -> Result<FilterConfig> {
    let trajectory = cfg.resolved_trajectory()?;
    let mut fc = FilterConfig::new(cfg.filter.kind, trajectory, 0);
    fc.chain = cfg.resolved_chain();
    fc.gmm = cfg.resolved_gmm();
    fc.denkf.localization_radius = cfg.filter.denkf.localization_radius;
    fc.denkf.inflation = cfg.filter.denkf.inflation;
    fc.variance_blend = cfg.resolved_variance_blend();
    fc.scale_step_by_components = cfg.resolved_scale_step();
    fc.prior_covariance = cfg.resolved_prior_covariance();
    fc.variance_floor = cfg.filter.variance_floor;
    fc.seed = derive_seed2(cfg.experiment.seed, tags::ANALYSIS, cycle as u64);
    Ok(fc)
}

fn write_ensemble_csv(dir: &Path, name: &str, ens: &Ensemble) -> Result<String> {
    let path = dir.join(name);
    let file = File::create(&path)?;
    ens.write_csv(BufWriter::new(file))?;
    Ok(name.to_string())
}

/// Run the configured QG twin experiment; returns the manifest (also written
/// to `<output_dir>/manifest.json` along with all other artifacts).
pub fn run_twin_experiment(cfg: &ExperimentConfig) -> Result<RunManifest> {
    if cfg.experiment.model != ModelKind::Qg {
        return Err(Error::config("run_twin_experiment needs experiment.model = \"qg\""));
    }
    let started = Instant::now();
    let resolved = cfg.resolve()?;
    let out_dir = PathBuf::from(&cfg.experiment.output_dir);
    std::fs::create_dir_all(&out_dir)?;

    let mut manifest = RunManifest::new(resolved.clone());
    manifest.record_seed(
        "truth_perturbation",
        derive_seed(cfg.experiment.seed, tags::TRUTH_PERTURBATION),
    );
    manifest.record_seed(
        "init_ensemble_base",
        derive_seed2(cfg.experiment.seed, tags::INIT_ENSEMBLE, 0),
    );

    let setup = build_twin_setup(&resolved)?;
    let grid = *setup.model.grid();
    let distance: DistanceFn = {
        let grid = grid;
        Arc::new(move |i, j| grid.cell_distance(i, j))
    };

    let metrics_path = out_dir.join("metrics.csv");
    let mut metrics = BufWriter::new(File::create(&metrics_path)?);
    writeln!(metrics, "{METRICS_HEADER}")?;
    manifest.record_artifact("metrics.csv");

    let mut rank_hist = RankHistogram::new(cfg.experiment.n_ens, cfg.output.rank_stride);

    let mut truth = setup.truth0.clone();
    let mut analysis = setup.initial_ensemble.clone();
    let obs_interval = resolved.qg.obs_interval;

    if cfg.output.save_ensembles {
        let name = write_ensemble_csv(&out_dir, "ens_initial.csv", &analysis)?;
        manifest.record_artifact(name);
        let path = out_dir.join("truth_0000.qg1");
        write_qg1(BufWriter::new(File::create(&path)?), &grid, truth.as_slice())?;
        manifest.record_artifact("truth_0000.qg1");
    }

    for cycle in 1..=cfg.experiment.cycles {
        let mut record = CycleRecord {
            cycle,
            ..Default::default()
        };

        let forecast_started = Instant::now();
        truth = match setup.model.advance(&truth, 0.0, obs_interval as f64) {
            Ok(t) => t,
            Err(e) => {
                manifest.aborted = Some((cycle, "truth propagation".to_string()));
                manifest.write(&out_dir)?;
                return Err(e);
            }
        };
        let forecast_ens = match forecast(
            setup.model.as_ref(),
            &analysis,
            ((cycle - 1) * obs_interval) as f64,
            (cycle * obs_interval) as f64,
        ) {
            Ok(f) => f,
            Err(e) => {
                manifest.aborted = Some((cycle, "forecast".to_string()));
                manifest.write(&out_dir)?;
                return Err(e);
            }
        };
        record.forecast_secs = forecast_started.elapsed().as_secs_f64();

        let op = build_observation_operator(&resolved, &grid, cycle)?;
        let y = synthesize_observation(&resolved, op.as_ref(), &truth, cycle)?;

        let mut fc = filter_config_for_cycle(&resolved, cycle)?;
        fc.denkf.distance = Some(distance.clone());

        let forecast_mean = ensemble_mean(&forecast_ens);
        let result = match analysis_step(forecast_ens, &y, op, &fc) {
            Ok(r) => r,
            Err(e) => {
                manifest.aborted = Some((cycle, "analysis".to_string()));
                manifest.write(&out_dir)?;
                return Err(e);
            }
        };

        record.rmse_forecast = rmse(&forecast_mean, &truth)?;
        record.rmse_analysis = rmse(&ensemble_mean(&result.analysis), &truth)?;
        record.acceptance_rate = result.mean_acceptance_rate();
        record.selected_n_c = result.gmm_report.as_ref().map(|r| r.selected_n_c);
        record.analysis_secs = result.timings.analysis_secs;

        write_metrics_row(
            &mut metrics,
            cycle,
            record.rmse_forecast,
            record.rmse_analysis,
            record.acceptance_rate,
        )?;

        let ranks = rank_of_truth(
            &result.analysis,
            &truth,
            cfg.output.rank_stride,
            derive_seed2(cfg.experiment.seed, tags::RANK_TIES, cycle as u64),
        )?;
        rank_hist.accumulate(&ranks)?;

        if !result.chain_stats.is_empty() {
            let name = format!("chain_stats_{cycle:04}.json");
            let mut w = BufWriter::new(File::create(out_dir.join(&name))?);
            for s in &result.chain_stats {
                s.write_json(&mut w)?;
            }
            record.artifacts.push(name);
        }
        if let Some(report) = &result.gmm_report {
            let name = format!("gmm_report_{cycle:04}.json");
            report.write_json(BufWriter::new(File::create(out_dir.join(&name))?))?;
            record.artifacts.push(name);
        }
        if cfg.output.qq_interval > 0 && cycle % cfg.output.qq_interval == 0 {
            let radius = cfg.filter.denkf.localization_radius.unwrap_or(12.0);
            let g = grid;
            let dist = move |i: usize, j: usize| g.cell_distance(i, j);
            let qq = chi_square_qq(&result.forecast, Some(radius), Some(&dist))?;
            let name = format!("qq_forecast_{cycle:04}.json");
            qq.write_json(BufWriter::new(File::create(out_dir.join(&name))?))?;
            record.artifacts.push(name);
        }
        if cfg.output.save_ensembles {
            record
                .artifacts
                .push(write_ensemble_csv(&out_dir, &format!("ens_forecast_{cycle:04}.csv"), &result.forecast)?);
            record
                .artifacts
                .push(write_ensemble_csv(&out_dir, &format!("ens_analysis_{cycle:04}.csv"), &result.analysis)?);
            let name = format!("truth_{cycle:04}.qg1");
            write_qg1(
                BufWriter::new(File::create(out_dir.join(&name))?),
                &grid,
                truth.as_slice(),
            )?;
            record.artifacts.push(name);
        }

        analysis = result.analysis;
        manifest.cycles.push(record);
    }
    metrics.flush()?;

    if cfg.experiment.cycles > 0 {
        rank_hist.write_json(BufWriter::new(
            File::create(out_dir.join("rank_histogram.json"))?,
        ))?;
        manifest.record_artifact("rank_histogram.json");
    }

    manifest.total_secs = started.elapsed().as_secs_f64();
    manifest.write(&out_dir)?;
    Ok(manifest)
}

/// RMSE time series of a no-assimilation free run from the same twin setup:
/// the baseline the filters must beat.
pub fn free_run_rmse(cfg: &ExperimentConfig) -> Result<Vec<f64>> {
    let mut free = cfg.clone();
    free.filter.kind = FilterKind::FreeRun;
    let setup = build_twin_setup(&free)?;
    let obs_interval = free.qg.obs_interval;
    let mut truth = setup.truth0.clone();
    let mut ens = setup.initial_ensemble.clone();
    let mut series = Vec::with_capacity(free.experiment.cycles);
    for cycle in 1..=free.experiment.cycles {
        truth = setup.model.advance(&truth, 0.0, obs_interval as f64)?;
        ens = forecast(
            setup.model.as_ref(),
            &ens,
            ((cycle - 1) * obs_interval) as f64,
            (cycle * obs_interval) as f64,
        )?;
        series.push(rmse(&ensemble_mean(&ens), &truth)?);
    }
    Ok(series)
}
