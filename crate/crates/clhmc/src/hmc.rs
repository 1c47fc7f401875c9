//! Hamiltonian Monte Carlo core: kinetic/total energy, symplectic integrators
//! of the position-Verlet family, proposal generation, Metropolis acceptance,
//! and Markov-chain orchestration.

use std::io::Write;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::ensemble::{Ensemble, StateVector};
use crate::error::{Error, Result};
use crate::potentials::PotentialFunction;
use crate::rng::{rng_from_seed, Rng};

/// Diagonal mass matrix M with cached reciprocals and square roots.
#[derive(Debug, Clone)]
pub struct MassMatrix {
    diagonal: Vec<f64>,
    inv_diagonal: Vec<f64>,
    sqrt_diagonal: Vec<f64>,
}

impl MassMatrix {
    pub fn new(diagonal: Vec<f64>) -> Result<Self> {
        if diagonal.iter().any(|&m| !(m > 0.0) || !m.is_finite()) {
            return Err(Error::invalid("mass matrix entries must be positive"));
        }
        let inv_diagonal = diagonal.iter().map(|m| 1.0 / m).collect();
        let sqrt_diagonal = diagonal.iter().map(|m| m.sqrt()).collect();
        Ok(Self {
            diagonal,
            inv_diagonal,
            sqrt_diagonal,
        })
    }

    pub fn identity(n: usize) -> Self {
        Self::new(vec![1.0; n]).unwrap()
    }

    pub fn dim(&self) -> usize {
        self.diagonal.len()
    }

    pub fn diagonal(&self) -> &[f64] {
        &self.diagonal
    }

    /// Draw p ~ N(0, M).
    pub fn sample_momentum(&self, rng: &mut Rng) -> Vec<f64> {
        self.sqrt_diagonal
            .iter()
            .map(|s| {
                let z: f64 = StandardNormal.sample(rng);
                s * z
            })
            .collect()
    }
}

/// Position-momentum pair.
#[derive(Debug, Clone)]
pub struct PhasePoint {
    pub position: StateVector,
    pub momentum: Vec<f64>,
}

impl PhasePoint {
    pub fn new(position: StateVector, momentum: Vec<f64>) -> Result<Self> {
        if position.len() != momentum.len() {
            return Err(Error::DimensionMismatch {
                expected: position.len(),
                actual: momentum.len(),
            });
        }
        if momentum.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("momentum contains non-finite entries"));
        }
        Ok(Self { position, momentum })
    }
}

/// Symplectic schemes of the position-Verlet family. `TwoStage` and
/// `ThreeStage` are the minimum-error multi-stage splittings with
/// b = 0.193183327503784 and (b1, a1) = (0.118880109665480, 0.296195042611266);
/// the remaining coefficients follow from symmetry and consistency.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Integrator {
    Verlet,
    TwoStage,
    ThreeStage,
}

const TWO_STAGE_B: f64 = 0.193183327503784;
const THREE_STAGE_B1: f64 = 0.118880109665480;
const THREE_STAGE_A1: f64 = 0.296195042611266;

impl Integrator {
    /// Palindromic kick/drift coefficients. A step of size h applies
    /// kick(k_0 h), drift(d_0 h), kick(k_1 h), ..., drift(d_{s-1} h),
    /// kick(k_s h). Both coefficient lists sum to 1.
    pub fn coefficients(self) -> (&'static [f64], &'static [f64]) {
        match self {
            Integrator::Verlet => {
                const K: [f64; 2] = [0.5, 0.5];
                const D: [f64; 1] = [1.0];
                (&K, &D)
            }
            Integrator::TwoStage => {
                const K: [f64; 3] = [TWO_STAGE_B, 1.0 - 2.0 * TWO_STAGE_B, TWO_STAGE_B];
                const D: [f64; 2] = [0.5, 0.5];
                (&K, &D)
            }
            Integrator::ThreeStage => {
                const K: [f64; 4] = [
                    THREE_STAGE_B1,
                    0.5 - THREE_STAGE_B1,
                    0.5 - THREE_STAGE_B1,
                    THREE_STAGE_B1,
                ];
                const D: [f64; 3] = [
                    THREE_STAGE_A1,
                    1.0 - 2.0 * THREE_STAGE_A1,
                    THREE_STAGE_A1,
                ];
                (&K, &D)
            }
        }
    }

    /// Gradient evaluations per step.
    pub fn stages(self) -> usize {
        self.coefficients().0.len()
    }
}

impl std::str::FromStr for Integrator {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "verlet" => Ok(Integrator::Verlet),
            "two_stage" => Ok(Integrator::TwoStage),
            "three_stage" => Ok(Integrator::ThreeStage),
            other => Err(Error::invalid(format!("unknown integrator '{other}'"))),
        }
    }
}

/// Hamiltonian trajectory settings: step size h, step count m, and the
/// symplectic scheme. The trajectory length is T = m h.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectoryParams {
    pub step_size: f64,
    pub n_steps: usize,
    pub integrator: Integrator,
}

impl TrajectoryParams {
    pub fn new(step_size: f64, n_steps: usize, integrator: Integrator) -> Result<Self> {
        if !(step_size > 0.0) {
            return Err(Error::invalid("step size must be > 0"));
        }
        if n_steps == 0 {
            return Err(Error::invalid("step count must be >= 1"));
        }
        Ok(Self {
            step_size,
            n_steps,
            integrator,
        })
    }

    pub fn trajectory_length(&self) -> f64 {
        self.step_size * self.n_steps as f64
    }
}

/// 1/2 p' M^{-1} p.
pub fn kinetic_energy(p: &[f64], mass: &MassMatrix) -> f64 {
    0.5 * p
        .iter()
        .zip(&mass.inv_diagonal)
        .map(|(pi, mi)| pi * pi * mi)
        .sum::<f64>()
}

/// Kinetic plus potential energy at a phase point.
pub fn total_energy(
    pt: &PhasePoint,
    mass: &MassMatrix,
    potential: &dyn PotentialFunction,
) -> f64 {
    kinetic_energy(&pt.momentum, mass) + potential.value(pt.position.as_slice())
}

fn kick(p: &mut [f64], x: &[f64], coeff: f64, potential: &dyn PotentialFunction) -> Result<()> {
    let g = potential.gradient(x);
    for (pi, gi) in p.iter_mut().zip(&g) {
        if !gi.is_finite() {
            return Err(Error::TrajectoryDivergence);
        }
        *pi -= coeff * gi;
    }
    Ok(())
}

fn drift(x: &mut [f64], p: &[f64], coeff: f64, mass: &MassMatrix) {
    for ((xi, pi), mi) in x.iter_mut().zip(p).zip(&mass.inv_diagonal) {
        *xi += coeff * pi * mi;
    }
}

fn step_in_place(
    x: &mut [f64],
    p: &mut [f64],
    params: &TrajectoryParams,
    mass: &MassMatrix,
    potential: &dyn PotentialFunction,
) -> Result<()> {
    let (kicks, drifts) = params.integrator.coefficients();
    let h = params.step_size;
    kick(p, x, kicks[0] * h, potential)?;
    for s in 0..drifts.len() {
        drift(x, p, drifts[s] * h, mass);
        kick(p, x, kicks[s + 1] * h, potential)?;
    }
    if x.iter().any(|v| !v.is_finite()) || p.iter().any(|v| !v.is_finite()) {
        return Err(Error::TrajectoryDivergence);
    }
    Ok(())
}

/// Advance one step of size h under dx/dt = M^{-1} p, dp/dt = -grad J(x).
pub fn symplectic_step(
    pt: &PhasePoint,
    params: &TrajectoryParams,
    mass: &MassMatrix,
    potential: &dyn PotentialFunction,
) -> Result<PhasePoint> {
    let mut x = pt.position.as_slice().to_vec();
    let mut p = pt.momentum.clone();
    step_in_place(&mut x, &mut p, params, mass, potential)?;
    Ok(PhasePoint {
        position: StateVector::new(x)?,
        momentum: p,
    })
}

/// Compose m symplectic steps, approximating the Hamiltonian flow over
/// T = m h.
pub fn integrate_trajectory(
    pt: &PhasePoint,
    params: &TrajectoryParams,
    mass: &MassMatrix,
    potential: &dyn PotentialFunction,
) -> Result<PhasePoint> {
    let mut x = pt.position.as_slice().to_vec();
    let mut p = pt.momentum.clone();
    for _ in 0..params.n_steps {
        step_in_place(&mut x, &mut p, params, mass, potential)?;
    }
    Ok(PhasePoint {
        position: StateVector::new(x)?,
        momentum: p,
    })
}

/// Metropolis acceptance probability 1 ^ e^{-dH}.
pub fn acceptance_probability(delta_h: f64) -> f64 {
    if delta_h.is_nan() {
        0.0
    } else if delta_h <= 0.0 {
        1.0
    } else {
        (-delta_h).exp()
    }
}

/// Outcome of one proposal.
#[derive(Debug, Clone)]
pub struct ProposalOutcome {
    pub next: Vec<f64>,
    pub accepted: bool,
    pub delta_h: f64,
}

/// One HMC transition: draw p ~ N(0, M), integrate the trajectory, accept the
/// proposal with probability 1 ^ e^{-dH}. Momentum is discarded either way; a
/// diverged trajectory counts as a rejection with dH = +inf.
pub fn propose_and_accept(
    x_current: &[f64],
    mass: &MassMatrix,
    potential: &dyn PotentialFunction,
    params: &TrajectoryParams,
    rng: &mut Rng,
) -> ProposalOutcome {
    let p0 = mass.sample_momentum(rng);
    let j0 = potential.value(x_current);
    let h0 = kinetic_energy(&p0, mass) + j0;

    let mut x = x_current.to_vec();
    let mut p = p0;
    let mut diverged = false;
    for _ in 0..params.n_steps {
        if step_in_place(&mut x, &mut p, params, mass, potential).is_err() {
            diverged = true;
            break;
        }
    }

    let delta_h = if diverged {
        f64::INFINITY
    } else {
        let h1 = kinetic_energy(&p, mass) + potential.value(&x);
        if h1.is_finite() {
            h1 - h0
        } else {
            f64::INFINITY
        }
    };

    let a = acceptance_probability(delta_h);
    let u: f64 = rng.random();
    if a > u {
        ProposalOutcome {
            next: x,
            accepted: true,
            delta_h,
        }
    } else {
        ProposalOutcome {
            next: x_current.to_vec(),
            accepted: false,
            delta_h,
        }
    }
}

/// Chain schedule: burn-in transitions to discard, transitions to discard
/// between kept states, the RNG seed, and the starting position.
#[derive(Debug, Clone)]
pub struct ChainConfig {
    pub burn_in: usize,
    pub mixing_steps: usize,
    pub seed: u64,
    pub initial: StateVector,
}

/// Counters over all post-burn-in proposals of a chain.
#[derive(Debug, Clone, serde::Serialize)]
pub struct ChainStats {
    pub proposals: usize,
    pub acceptances: usize,
    pub acceptance_rate: f64,
    /// Mean |dH| over proposals with finite energy loss.
    pub mean_abs_dh: f64,
}

impl ChainStats {
    pub fn write_json<W: Write>(&self, mut w: W) -> Result<()> {
        let value = serde_json::json!({
            "proposals": self.proposals,
            "acceptances": self.acceptances,
            "acceptance_rate": self.acceptance_rate,
            "mean_abs_dH": self.mean_abs_dh,
        });
        serde_json::to_writer(&mut w, &value)?;
        writeln!(w)?;
        Ok(())
    }
}

/// Run a chain: discard `burn_in` transitions, then keep one state per
/// `mixing_steps + 1` transitions until `n_samples` states are collected.
/// Deterministic given the seed.
pub fn run_chain(
    potential: &dyn PotentialFunction,
    mass: &MassMatrix,
    params: &TrajectoryParams,
    cfg: &ChainConfig,
    n_samples: usize,
) -> Result<(Ensemble, ChainStats)> {
    if n_samples == 0 {
        return Err(Error::invalid("n_samples must be >= 1"));
    }
    if cfg.initial.len() != mass.dim() {
        return Err(Error::DimensionMismatch {
            expected: mass.dim(),
            actual: cfg.initial.len(),
        });
    }
    let j0 = potential.value(cfg.initial.as_slice());
    if !j0.is_finite() {
        return Err(Error::FitFailure(format!(
            "potential is non-finite ({j0}) at the chain's initial state"
        )));
    }

    let mut rng = rng_from_seed(cfg.seed);
    let mut x = cfg.initial.as_slice().to_vec();

    for _ in 0..cfg.burn_in {
        let out = propose_and_accept(&x, mass, potential, params, &mut rng);
        x = out.next;
    }

    let mut proposals = 0usize;
    let mut acceptances = 0usize;
    let mut abs_dh_sum = 0.0;
    let mut abs_dh_count = 0usize;
    let mut samples = Vec::with_capacity(n_samples);
    while samples.len() < n_samples {
        for _ in 0..=cfg.mixing_steps {
            let out = propose_and_accept(&x, mass, potential, params, &mut rng);
            proposals += 1;
            if out.accepted {
                acceptances += 1;
            }
            if out.delta_h.is_finite() {
                abs_dh_sum += out.delta_h.abs();
                abs_dh_count += 1;
            }
            x = out.next;
        }
        samples.push(StateVector::new(x.clone())?);
    }

    let stats = ChainStats {
        proposals,
        acceptances,
        acceptance_rate: acceptances as f64 / proposals as f64,
        mean_abs_dh: if abs_dh_count > 0 {
            abs_dh_sum / abs_dh_count as f64
        } else {
            f64::INFINITY
        },
    };
    Ok((Ensemble::new(samples, 0)?, stats))
}

#[cfg(test)]
pub(crate) mod test_targets {
    use crate::potentials::PotentialFunction;

    /// J(x) = 1/2 sum x_i^2 / s_i^2 — a diagonal Gaussian target.
    pub struct DiagonalGaussian {
        pub scales: Vec<f64>,
    }

    impl DiagonalGaussian {
        pub fn standard(n: usize) -> Self {
            Self {
                scales: vec![1.0; n],
            }
        }
    }

    impl PotentialFunction for DiagonalGaussian {
        fn value(&self, x: &[f64]) -> f64 {
            0.5 * x
                .iter()
                .zip(&self.scales)
                .map(|(xi, s)| xi * xi / (s * s))
                .sum::<f64>()
        }

        fn gradient(&self, x: &[f64]) -> Vec<f64> {
            x.iter().zip(&self.scales).map(|(xi, s)| xi / (s * s)).collect()
        }
    }

    /// Potential with zero gradient everywhere (free particle).
    pub struct FreeParticle;

    impl PotentialFunction for FreeParticle {
        fn value(&self, _x: &[f64]) -> f64 {
            0.0
        }

        fn gradient(&self, x: &[f64]) -> Vec<f64> {
            vec![0.0; x.len()]
        }
    }
}
