use clhmc::harness::config::ExperimentConfig;
use clhmc::harness::twin::*;
use clhmc::ensemble::{ensemble_covariance, ensemble_mean};
use clhmc::filters::{analysis_step, forecast, ModelPropagator};
use clhmc::potentials::PotentialFunction;

fn main() {
    let cfg = ExperimentConfig::from_toml_str(r#"
[experiment]
model = "qg"
n_ens = 20
cycles = 10
seed = 2016
output_dir = "/tmp/dbg_qg"

[filter]
kind = "mc_clhmc"
"#).unwrap();
    let mut cfg = cfg;
    cfg.filter.prior_covariance = Some(clhmc::filters::PriorCovariance::EnsembleHybrid { gamma: 1.0 });
    let cfg = cfg.resolve().unwrap();
    let setup = build_twin_setup(&cfg).unwrap();
    let grid = *setup.model.grid();
    let mut truth = setup.truth0.clone();
    let mut analysis = setup.initial_ensemble.clone();
    for cycle in 1..=10usize {
        truth = setup.model.advance(&truth, 0.0, 10.0).unwrap();
        let fens = forecast(setup.model.as_ref(), &analysis, 0.0, 10.0).unwrap();
        let var = ensemble_covariance(&fens, true).unwrap().diagonal();
        let interior: Vec<f64> = (0..var.len()).filter(|&i| !grid.is_boundary(i)).map(|i| var[i]).collect();
        let vmin = interior.iter().cloned().fold(f64::INFINITY, f64::min);
        let vmax = interior.iter().cloned().fold(0.0f64, f64::max);
        let vmean = interior.iter().sum::<f64>() / interior.len() as f64;
        println!("cycle {cycle}: forecast interior var min {vmin:.3e} mean {vmean:.3e} max {vmax:.3e}");
        let op = build_observation_operator(&cfg, &grid, cycle).unwrap();
        let y = synthesize_observation(&cfg, op.as_ref(), &truth, cycle).unwrap();
        let fc = filter_config_for_cycle(&cfg, cycle).unwrap();
        // probe the potential at the chain start
        use clhmc::ensemble::StateVector as SV;
        use std::sync::Arc;
        let (mean, anoms) = clhmc::ensemble::ensemble_anomalies(&fens);
        let prior = clhmc::potentials::GaussianPriorSpec::ensemble_hybrid(mean.clone(), &anoms, 1.0, fc.variance_floor).unwrap();
        let pot = clhmc::potentials::GaussianPotential::new(prior, y.clone(), op.clone());
        let j0 = pot.value(mean.as_slice());
        let g0 = pot.gradient(mean.as_slice());
        let gmax = g0.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        println!("  J(mean) = {j0:.3}, max|grad| = {gmax:.3e}");
        let result = analysis_step(fens, &y, op, &fc).unwrap();
        let st: Vec<String> = result.chain_stats.iter().map(|s| format!("acc {:.3}", s.acceptance_rate)).collect();
        use clhmc::diagnostics::rmse;
        let ra = rmse(&ensemble_mean(&result.analysis), &truth).unwrap();
        println!("  chains: {:?} n_c {:?} rmse_analysis {:.4}", st, result.gmm_report.as_ref().map(|r| r.selected_n_c), ra);
        analysis = result.analysis;
        let _ = SV::new(vec![0.0]).unwrap();
    }
}
