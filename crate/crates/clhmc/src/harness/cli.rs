//! Command-line entry: `run`, `fit-gmm`, `sample`, `diag`, and
//! `validate-config` subcommands. Exit codes: 0 success, 1 configuration or
//! usage error, 2 runtime failure.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use log::error;

use crate::diagnostics::{rmse, write_metrics_row, METRICS_HEADER};
use crate::ensemble::{ensemble_mean, Ensemble, Observation, StateVector};
use crate::error::{Error, Result};
use crate::gmm::{select_model, Criterion, EmSettings, GmmParams};
use crate::hmc::{run_chain, ChainConfig, Integrator, MassMatrix, TrajectoryParams};
use crate::potentials::{
    GaussianPotential, GaussianPriorSpec, IdentityOperator, MixturePotential, MixturePriorSpec,
    PotentialFunction,
};
use crate::rng::{derive_seed2, tags};

use super::config::{ExperimentConfig, ModelKind};
use super::static1d::run_static_1d;
use super::twin::run_twin_experiment;

#[derive(Parser)]
#[command(
    name = "clhmc",
    about = "Non-Gaussian ensemble data assimilation with cluster HMC sampling filters",
    version
)]
struct Cli {
    /// Worker threads for member propagation and multi-chain sampling
    /// (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a twin experiment (QG) or the one-dimensional static experiment.
    Run(RunArgs),
    /// Validate a configuration file and exit.
    ValidateConfig(ConfigArg),
    /// Fit a Gaussian mixture to an ensemble CSV with AIC/BIC selection.
    FitGmm(FitGmmArgs),
    /// Sample a potential described by a JSON spec with HMC chains.
    Sample(SampleArgs),
    /// Recompute metrics from the stored ensembles of a previous run.
    Diag(DiagArgs),
}

#[derive(Args)]
struct ConfigArg {
    /// Path to a TOML (or JSON) experiment configuration.
    #[arg(long)]
    config: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Override the master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FitGmmArgs {
    /// Ensemble CSV (member_id,x_0,...).
    #[arg(long)]
    input: PathBuf,
    /// Output JSON for the selected mixture parameters.
    #[arg(long)]
    output: PathBuf,
    /// Full selection report JSON (optional).
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long, default_value = "aic")]
    criterion: String,
    #[arg(long, default_value_t = 8)]
    max_components: usize,
    #[arg(long, default_value_t = 5)]
    min_members: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct SampleArgs {
    /// JSON potential spec: {"gmm": {...}} or {"gaussian": {"mean": [...],
    /// "variances": [...]}}, optionally with {"observation": {"values":
    /// [...], "variances": [...]}} (identity operator).
    #[arg(long)]
    potential: PathBuf,
    /// Output ensemble CSV.
    #[arg(long)]
    out: PathBuf,
    /// Chain statistics JSON (optional).
    #[arg(long)]
    stats: Option<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[arg(long, default_value_t = 0.05)]
    step_size: f64,
    #[arg(long, default_value_t = 20)]
    n_steps: usize,
    #[arg(long, default_value = "verlet")]
    integrator: String,
    #[arg(long, default_value_t = 0)]
    burn_in: usize,
    #[arg(long, default_value_t = 15)]
    mixing_steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Start the chain at this position (defaults to the prior mean).
    #[arg(long, value_delimiter = ',')]
    init: Option<Vec<f64>>,
}

#[derive(Args)]
struct DiagArgs {
    /// Output directory of a `run` executed with output.save_ensembles.
    #[arg(long)]
    run_dir: PathBuf,
    /// Where to write the recomputed metrics (default:
    /// <run_dir>/diag_metrics.csv).
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Parse argv and execute; returns the process exit code.
pub fn cli_entry<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            // clap prints its own usage/help text; help and version requests
            // are successes, everything else is a usage error
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };

    if let Some(n) = cli.threads {
        // a pool may already exist in-process (tests); the existing one wins
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }

    let outcome = match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::ValidateConfig(args) => cmd_validate(args),
        Command::FitGmm(args) => cmd_fit_gmm(args),
        Command::Sample(args) => cmd_sample(args),
        Command::Diag(args) => cmd_diag(args),
    };
    match outcome {
        Ok(()) => 0,
        Err(e) => {
            error!("{e}");
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::InvalidInput(_) => 1,
                _ => 2,
            }
        }
    }
}

fn cmd_validate(args: ConfigArg) -> Result<()> {
    ExperimentConfig::from_path(&args.config)?;
    println!("configuration OK: {}", args.config.display());
    Ok(())
}

fn cmd_run(args: RunArgs) -> Result<()> {
    let mut cfg = ExperimentConfig::from_path(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.experiment.seed = seed;
    }
    if let Some(out) = args.out {
        cfg.experiment.output_dir = out.to_string_lossy().to_string();
    }
    cfg.validate()?;
    let manifest = match cfg.experiment.model {
        ModelKind::Qg => run_twin_experiment(&cfg)?,
        ModelKind::Static1d => run_static_1d(&cfg)?,
    };
    println!(
        "run complete: {} cycles, {:.2} s, outputs in {}",
        manifest.cycles.len(),
        manifest.total_secs,
        cfg.experiment.output_dir
    );
    Ok(())
}

fn cmd_fit_gmm(args: FitGmmArgs) -> Result<()> {
    let criterion = match args.criterion.as_str() {
        "aic" => Criterion::Aic,
        "bic" => Criterion::Bic,
        other => return Err(Error::config(format!("unknown criterion '{other}'"))),
    };
    let file = File::open(&args.input)?;
    let data = Ensemble::read_csv(BufReader::new(file), 0)?;
    let cap = (data.n_ens() / args.min_members.max(1)).max(1);
    let candidates: Vec<usize> = (1..=args.max_components.min(cap)).collect();
    let report = select_model(
        &data,
        &candidates,
        criterion,
        args.min_members,
        args.seed,
        &EmSettings::default(),
    )?;
    let selected = report.selected();
    selected
        .fit
        .params
        .write_json(BufWriter::new(File::create(&args.output)?))?;
    if let Some(path) = args.report {
        report.write_json(BufWriter::new(File::create(path)?))?;
    }
    println!(
        "fit {} members -> {} components ({} = {:.3})",
        data.n_ens(),
        report.selected_n_c,
        args.criterion,
        selected.criterion
    );
    Ok(())
}

#[derive(serde::Deserialize)]
struct GaussianSpec {
    mean: Vec<f64>,
    variances: Vec<f64>,
}

#[derive(serde::Deserialize)]
struct ObservationSpec {
    values: Vec<f64>,
    variances: Vec<f64>,
}

#[derive(serde::Deserialize)]
struct PotentialSpec {
    gmm: Option<serde_json::Value>,
    gaussian: Option<GaussianSpec>,
    observation: Option<ObservationSpec>,
}

/// Mixture negative-log-density without an observation term.
struct PriorOnlyPotential {
    spec: MixturePriorSpec,
}

impl PotentialFunction for PriorOnlyPotential {
    fn value(&self, x: &[f64]) -> f64 {
        let n_c = self.spec.n_c();
        let scores: Vec<f64> = (0..n_c)
            .map(|i| {
                let (j, _) = self.spec.component_quadratic(x, i);
                let gmm = self.spec.gmm();
                gmm.weights()[i].ln() - 0.5 * gmm.log_det(i) - j
            })
            .collect();
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return f64::INFINITY;
        }
        let sum: f64 = scores.iter().map(|s| (s - max).exp()).sum();
        -(max + sum.ln())
    }

    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let n_c = self.spec.n_c();
        let gmm = self.spec.gmm();
        let scored: Vec<(f64, Vec<f64>)> = (0..n_c)
            .map(|i| {
                let (j, g) = self.spec.component_quadratic(x, i);
                (gmm.weights()[i].ln() - 0.5 * gmm.log_det(i) - j, g)
            })
            .collect();
        let max = scored
            .iter()
            .map(|(s, _)| *s)
            .fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = scored.iter().map(|(s, _)| (s - max).exp()).collect();
        let total: f64 = weights.iter().sum();
        let mut out = vec![0.0; x.len()];
        for ((_, g), w) in scored.iter().zip(&weights) {
            for (o, gi) in out.iter_mut().zip(g) {
                *o += w / total * gi;
            }
        }
        out
    }
}

fn cmd_sample(args: SampleArgs) -> Result<()> {
    let text = std::fs::read_to_string(&args.potential)?;
    let spec: PotentialSpec = serde_json::from_str(&text)?;
    let integrator: Integrator = args.integrator.parse()?;
    let trajectory = TrajectoryParams::new(args.step_size, args.n_steps, integrator)?;

    let observation = spec
        .observation
        .map(|o| Observation::new(o.values, o.variances))
        .transpose()?;

    let (potential, dim, default_init, mass): (Box<dyn PotentialFunction>, usize, Vec<f64>, MassMatrix) =
        match (&spec.gmm, &spec.gaussian) {
            (Some(gmm_value), None) => {
                let gmm = GmmParams::from_json(&gmm_value.to_string())?;
                let dim = gmm.dim();
                let (mean, cov) = crate::gmm::gmm_joint_moments(&gmm);
                let mass =
                    MassMatrix::new(cov.diagonal().iter().map(|v| 1.0 / v.max(1e-12)).collect())?;
                let mspec = MixturePriorSpec::new(gmm)?;
                let init = mean.as_slice().to_vec();
                match &observation {
                    Some(y) => {
                        if y.m_obs() != dim {
                            return Err(Error::config(
                                "observation dimension must match the state (identity operator)",
                            ));
                        }
                        let op = Arc::new(IdentityOperator::new(dim));
                        (
                            Box::new(MixturePotential::new(mspec, y.clone(), op)),
                            dim,
                            init,
                            mass,
                        )
                    }
                    None => (Box::new(PriorOnlyPotential { spec: mspec }), dim, init, mass),
                }
            }
            (None, Some(g)) => {
                let dim = g.mean.len();
                let background = StateVector::new(g.mean.clone())?;
                let cov = crate::ensemble::CovarianceEstimate::Diagonal(g.variances.clone());
                let prior = GaussianPriorSpec::new(background, &cov)?;
                let mass =
                    MassMatrix::new(g.variances.iter().map(|v| 1.0 / v.max(1e-12)).collect())?;
                let y = match &observation {
                    Some(y) => {
                        if y.m_obs() != dim {
                            return Err(Error::config(
                                "observation dimension must match the state (identity operator)",
                            ));
                        }
                        y.clone()
                    }
                    // a zero-information observation keeps the prior
                    None => Observation::with_constant_variance(vec![0.0; dim], 1e30)?,
                };
                let op = Arc::new(IdentityOperator::new(dim));
                (
                    Box::new(GaussianPotential::new(prior, y, op)),
                    dim,
                    g.mean.clone(),
                    mass,
                )
            }
            _ => {
                return Err(Error::config(
                    "potential spec needs exactly one of \"gmm\" or \"gaussian\"",
                ))
            }
        };

    let initial = match args.init {
        Some(v) => {
            if v.len() != dim {
                return Err(Error::config(format!(
                    "--init has {} entries, potential dimension is {dim}",
                    v.len()
                )));
            }
            StateVector::new(v)?
        }
        None => StateVector::new(default_init)?,
    };
    let cfg = ChainConfig {
        burn_in: args.burn_in,
        mixing_steps: args.mixing_steps,
        seed: derive_seed2(args.seed, tags::CHAIN, 0),
        initial,
    };
    let (samples, stats) = run_chain(potential.as_ref(), &mass, &trajectory, &cfg, args.n)?;
    samples.write_csv(BufWriter::new(File::create(&args.out)?))?;
    if let Some(path) = args.stats {
        stats.write_json(BufWriter::new(File::create(path)?))?;
    }
    println!(
        "sampled {} states (acceptance rate {:.3})",
        args.n, stats.acceptance_rate
    );
    Ok(())
}

fn cmd_diag(args: DiagArgs) -> Result<()> {
    let dir = args.run_dir;
    let manifest_text = std::fs::read_to_string(dir.join("manifest.json"))
        .map_err(|_| Error::config(format!("{} is not a run directory (no manifest.json)", dir.display())))?;
    let manifest: serde_json::Value = serde_json::from_str(&manifest_text)?;
    let cycles = manifest["cycles"]
        .as_array()
        .map(|a| a.len())
        .unwrap_or(0);
    let model = manifest["resolved_config"]["experiment"]["model"]
        .as_str()
        .unwrap_or("")
        .to_string();
    if model != "qg" {
        return Err(Error::config(
            "diag recomputes metrics for qg runs; static_1d runs carry their diagnostics in summary.json",
        ));
    }

    let out_path = args.out.unwrap_or_else(|| dir.join("diag_metrics.csv"));
    let mut out = BufWriter::new(File::create(&out_path)?);
    writeln!(out, "{METRICS_HEADER}")?;

    let mut max_dev = 0.0f64;
    let stored = read_stored_metrics(&dir.join("metrics.csv"))?;
    for cycle in 1..=cycles {
        let truth_path = dir.join(format!("truth_{cycle:04}.qg1"));
        let forecast_path = dir.join(format!("ens_forecast_{cycle:04}.csv"));
        let analysis_path = dir.join(format!("ens_analysis_{cycle:04}.csv"));
        if !truth_path.exists() || !forecast_path.exists() || !analysis_path.exists() {
            return Err(Error::config(
                "run is missing stored ensembles; re-run with output.save_ensembles = true",
            ));
        }
        let (_, _, truth_field) = crate::qg::read_qg1(BufReader::new(File::open(&truth_path)?))?;
        let truth = StateVector::new(truth_field)?;
        let forecast = Ensemble::read_csv(BufReader::new(File::open(&forecast_path)?), cycle)?;
        let analysis = Ensemble::read_csv(BufReader::new(File::open(&analysis_path)?), cycle)?;
        let rf = rmse(&ensemble_mean(&forecast), &truth)?;
        let ra = rmse(&ensemble_mean(&analysis), &truth)?;
        let stored_rate = stored.get(cycle - 1).and_then(|r| r.3);
        write_metrics_row(&mut out, cycle, rf, ra, stored_rate)?;
        if let Some(row) = stored.get(cycle - 1) {
            max_dev = max_dev.max((row.1 - rf).abs()).max((row.2 - ra).abs());
        }
    }
    println!(
        "recomputed {} cycles -> {} (max deviation from stored metrics: {:.3e})",
        cycles,
        out_path.display(),
        max_dev
    );
    Ok(())
}

type MetricsRow = (usize, f64, f64, Option<f64>);

fn read_stored_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let file = File::open(path)?;
    let mut rows = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() < 3 {
            continue;
        }
        let parse = |s: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|e| Error::invalid(format!("metrics parse: {e}")))
        };
        rows.push((
            fields[0]
                .parse::<usize>()
                .map_err(|e| Error::invalid(format!("metrics parse: {e}")))?,
            parse(fields[1])?,
            parse(fields[2])?,
            fields
                .get(3)
                .filter(|s| !s.is_empty())
                .map(|s| parse(s))
                .transpose()?,
        ));
    }
    Ok(rows)
}
