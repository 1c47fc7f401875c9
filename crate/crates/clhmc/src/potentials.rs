//! Negative-log-posterior builders with analytic gradients: the Gaussian-prior
//! potential of the original HMC filter and the stabilized mixture potential
//! of the cluster filters.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::ensemble::{CovarianceEstimate, Observation, StateVector};
use crate::error::{Error, Result};
use crate::gmm::GmmParams;

/// Observation operator H together with the adjoint of its linearization.
///
/// For linear operators `adjoint_apply` is independent of the linearization
/// point and satisfies `<H u, v> = <u, H' v>`.
pub trait ObservationOperator: Send + Sync {
    /// H(x): map a model state to observation space.
    fn apply(&self, x: &[f64]) -> Vec<f64>;

    /// H'(x)^T v: adjoint of the linearization at `x` applied to an
    /// observation-space vector.
    fn adjoint_apply(&self, x: &[f64], v: &[f64]) -> Vec<f64>;

    fn m_obs(&self) -> usize;

    /// State indices observed by a plain gather operator, if this is one.
    /// Used by covariance localization in observation space.
    fn gather_indices(&self) -> Option<&[usize]> {
        None
    }
}

/// The identity operator (observe every state component).
#[derive(Debug, Clone)]
pub struct IdentityOperator {
    n: usize,
    indices: Vec<usize>,
}

impl IdentityOperator {
    pub fn new(n: usize) -> Self {
        Self {
            n,
            indices: (0..n).collect(),
        }
    }
}

impl ObservationOperator for IdentityOperator {
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.to_vec()
    }

    fn adjoint_apply(&self, _x: &[f64], v: &[f64]) -> Vec<f64> {
        v.to_vec()
    }

    fn m_obs(&self) -> usize {
        self.n
    }

    fn gather_indices(&self) -> Option<&[usize]> {
        Some(&self.indices)
    }
}

/// Dense linear operator for tests and small problems: H(x) = A x.
#[derive(Debug, Clone)]
pub struct DenseLinearOperator {
    matrix: DMatrix<f64>,
}

impl DenseLinearOperator {
    pub fn new(matrix: DMatrix<f64>) -> Self {
        Self { matrix }
    }
}

impl ObservationOperator for DenseLinearOperator {
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        (&self.matrix * DVector::from_column_slice(x))
            .iter()
            .cloned()
            .collect()
    }

    fn adjoint_apply(&self, _x: &[f64], v: &[f64]) -> Vec<f64> {
        (self.matrix.transpose() * DVector::from_column_slice(v))
            .iter()
            .cloned()
            .collect()
    }

    fn m_obs(&self) -> usize {
        self.matrix.nrows()
    }
}

/// Negative-log-density contract used by the HMC machinery. Implementations
/// must be reentrant and side-effect free; non-finite return values signal
/// trajectory divergence to the caller rather than panicking.
pub trait PotentialFunction: Send + Sync {
    fn value(&self, x: &[f64]) -> f64;
    fn gradient(&self, x: &[f64]) -> Vec<f64>;
}

/// 1/2 || y - H(x) ||^2_{R^{-1}} with diagonal R.
pub fn obs_misfit(x: &[f64], y: &Observation, op: &dyn ObservationOperator) -> Result<f64> {
    let hx = op.apply(x);
    if hx.len() != y.m_obs() {
        return Err(Error::DimensionMismatch {
            expected: y.m_obs(),
            actual: hx.len(),
        });
    }
    Ok(0.5
        * hx.iter()
            .zip(&y.values)
            .zip(&y.error_variances)
            .map(|((h, yv), r)| {
                let d = yv - h;
                d * d / r
            })
            .sum::<f64>())
}

/// H'(x)^T R^{-1} (H(x) - y): gradient of the observation misfit.
fn obs_misfit_gradient(x: &[f64], y: &Observation, op: &dyn ObservationOperator) -> Vec<f64> {
    let hx = op.apply(x);
    let scaled: Vec<f64> = hx
        .iter()
        .zip(&y.values)
        .zip(&y.error_variances)
        .map(|((h, yv), r)| (h - yv) / r)
        .collect();
    op.adjoint_apply(x, &scaled)
}

/// Precision representation of a positive-definite covariance.
#[derive(Debug, Clone)]
enum Precision {
    /// Elementwise reciprocals of a diagonal covariance.
    Diagonal(Vec<f64>),
    /// Cholesky factorization of a full covariance, solved on demand.
    Factored(Cholesky<f64, Dyn>),
    /// Hybrid ensemble covariance B = Gamma + U U' with diagonal Gamma and
    /// tall-skinny U (scaled anomalies); B^{-1} applied through the Woodbury
    /// identity at O(n k) per solve.
    Woodbury {
        inv_gamma: Vec<f64>,
        u: DMatrix<f64>,
        /// Cholesky factor of the capacitance I + U' Gamma^{-1} U.
        capacitance: Cholesky<f64, Dyn>,
    },
}

impl Precision {
    fn build(cov: &CovarianceEstimate) -> Result<Self> {
        match cov {
            CovarianceEstimate::Diagonal(v) => {
                if v.iter().any(|&x| !(x > 0.0)) {
                    return Err(Error::invalid(
                        "covariance has non-positive variances; apply a floor upstream",
                    ));
                }
                Ok(Precision::Diagonal(v.iter().map(|x| 1.0 / x).collect()))
            }
            CovarianceEstimate::Full(m) => m
                .clone()
                .cholesky()
                .map(Precision::Factored)
                .ok_or_else(|| Error::invalid("covariance matrix is singular")),
        }
    }

    /// Sigma^{-1} d.
    fn apply(&self, d: &[f64]) -> Vec<f64> {
        match self {
            Precision::Diagonal(inv) => d.iter().zip(inv).map(|(x, p)| x * p).collect(),
            Precision::Factored(ch) => ch
                .solve(&DVector::from_column_slice(d))
                .iter()
                .cloned()
                .collect(),
            Precision::Woodbury {
                inv_gamma,
                u,
                capacitance,
            } => {
                // B^{-1} d = G d - G U (I + U' G U)^{-1} U' G d  with
                // G = Gamma^{-1}
                let gd = DVector::from_iterator(
                    d.len(),
                    d.iter().zip(inv_gamma).map(|(x, g)| x * g),
                );
                let w = capacitance.solve(&(u.transpose() * &gd));
                let ugw = u * w;
                gd.iter()
                    .zip(ugw.iter())
                    .zip(inv_gamma)
                    .map(|((gdi, ui), g)| gdi - g * ui)
                    .collect()
            }
        }
    }

    /// d' Sigma^{-1} d.
    fn quad(&self, d: &[f64]) -> f64 {
        match self {
            Precision::Diagonal(inv) => d.iter().zip(inv).map(|(x, p)| x * x * p).sum(),
            Precision::Factored(ch) => {
                let dv = DVector::from_column_slice(d);
                dv.dot(&ch.solve(&dv))
            }
            Precision::Woodbury { .. } => {
                let bd = self.apply(d);
                d.iter().zip(&bd).map(|(a, b)| a * b).sum()
            }
        }
    }
}

/// Gaussian prior N(x^b, B) with a solve-capable covariance.
pub struct GaussianPriorSpec {
    background: StateVector,
    precision: Precision,
}

impl GaussianPriorSpec {
    pub fn new(background: StateVector, covariance: &CovarianceEstimate) -> Result<Self> {
        if covariance.dim() != background.len() {
            return Err(Error::DimensionMismatch {
                expected: background.len(),
                actual: covariance.dim(),
            });
        }
        Ok(Self {
            background,
            precision: Precision::build(covariance)?,
        })
    }

    /// Hybrid ensemble prior B = gamma * D + A A' / (n_ens - 1), where D is
    /// the floored diagonal of the sample covariance and A the anomalies.
    /// The low-rank part carries the ensemble's spatial correlations; the
    /// scaled diagonal keeps B positive definite and leaves a little freedom
    /// off the ensemble span. Solves run through the Woodbury identity in
    /// O(n_var * n_ens), so the potential stays cheap at high dimension.
    pub fn ensemble_hybrid(
        background: StateVector,
        anomalies: &[Vec<f64>],
        gamma: f64,
        variance_floor: f64,
    ) -> Result<Self> {
        let n = background.len();
        let n_ens = anomalies.len();
        if n_ens < 2 {
            return Err(Error::invalid("hybrid prior needs n_ens >= 2"));
        }
        if anomalies.iter().any(|a| a.len() != n) {
            return Err(Error::DimensionMismatch {
                expected: n,
                actual: anomalies[0].len(),
            });
        }
        if !(gamma > 0.0) {
            return Err(Error::invalid("hybrid weight gamma must be > 0"));
        }
        let scale = 1.0 / (n_ens as f64 - 1.0);
        let mut variance = vec![0.0; n];
        for a in anomalies {
            for (v, ai) in variance.iter_mut().zip(a) {
                *v += ai * ai * scale;
            }
        }
        let inv_gamma: Vec<f64> = variance
            .iter()
            .map(|&v| 1.0 / (gamma * v.max(variance_floor)))
            .collect();
        let u = DMatrix::from_fn(n, n_ens, |i, e| anomalies[e][i] * scale.sqrt());
        let mut cap = DMatrix::identity(n_ens, n_ens);
        for a in 0..n_ens {
            for b in 0..n_ens {
                let mut dot = 0.0;
                for i in 0..n {
                    dot += u[(i, a)] * inv_gamma[i] * u[(i, b)];
                }
                cap[(a, b)] += dot;
            }
        }
        let capacitance = cap
            .cholesky()
            .ok_or_else(|| Error::invalid("hybrid capacitance is not positive definite"))?;
        Ok(Self {
            background,
            precision: Precision::Woodbury {
                inv_gamma,
                u,
                capacitance,
            },
        })
    }

    pub fn background(&self) -> &StateVector {
        &self.background
    }
}

/// Gaussian-prior potential: J(x) = 1/2 ||x - x^b||^2_{B^{-1}} + misfit,
/// with gradient B^{-1}(x - x^b) + H' R^{-1}(H(x) - y).
pub struct GaussianPotential {
    prior: GaussianPriorSpec,
    observation: Observation,
    operator: std::sync::Arc<dyn ObservationOperator>,
}

impl GaussianPotential {
    pub fn new(
        prior: GaussianPriorSpec,
        observation: Observation,
        operator: std::sync::Arc<dyn ObservationOperator>,
    ) -> Self {
        Self {
            prior,
            observation,
            operator,
        }
    }
}

impl PotentialFunction for GaussianPotential {
    fn value(&self, x: &[f64]) -> f64 {
        let d: Vec<f64> = x
            .iter()
            .zip(self.prior.background.as_slice())
            .map(|(a, b)| a - b)
            .collect();
        let prior_term = 0.5 * self.prior.precision.quad(&d);
        let misfit = obs_misfit(x, &self.observation, self.operator.as_ref())
            .unwrap_or(f64::INFINITY);
        prior_term + misfit
    }

    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let d: Vec<f64> = x
            .iter()
            .zip(self.prior.background.as_slice())
            .map(|(a, b)| a - b)
            .collect();
        let mut g = self.prior.precision.apply(&d);
        let og = obs_misfit_gradient(x, &self.observation, self.operator.as_ref());
        for (gi, oi) in g.iter_mut().zip(og) {
            *gi += oi;
        }
        g
    }
}

/// Gaussian-mixture prior with cached per-component precisions and
/// log-determinants.
pub struct MixturePriorSpec {
    gmm: GmmParams,
    precisions: Vec<Precision>,
    /// log tau_i - 1/2 log |Sigma_i|, the x-independent part of each
    /// component's log weight.
    log_coeffs: Vec<f64>,
}

impl MixturePriorSpec {
    pub fn new(gmm: GmmParams) -> Result<Self> {
        let precisions = (0..gmm.n_c())
            .map(|i| Precision::build(gmm.covariance(i)))
            .collect::<Result<Vec<_>>>()?;
        let log_coeffs = (0..gmm.n_c())
            .map(|i| gmm.weights()[i].ln() - 0.5 * gmm.log_det(i))
            .collect();
        Ok(Self {
            gmm,
            precisions,
            log_coeffs,
        })
    }

    pub fn n_c(&self) -> usize {
        self.gmm.n_c()
    }

    pub fn gmm(&self) -> &GmmParams {
        &self.gmm
    }

    /// J_{k,i}(x) = 1/2 ||x - mu_i||^2_{Sigma_i^{-1}} and its gradient
    /// Sigma_i^{-1} (x - mu_i).
    pub fn component_quadratic(&self, x: &[f64], i: usize) -> (f64, Vec<f64>) {
        let d: Vec<f64> = x
            .iter()
            .zip(self.gmm.mean(i).as_slice())
            .map(|(a, b)| a - b)
            .collect();
        let grad = self.precisions[i].apply(&d);
        let value = 0.5 * d.iter().zip(&grad).map(|(a, b)| a * b).sum::<f64>();
        (value, grad)
    }

    /// Per-component scores s_i(x) = log tau_i - 1/2 log|Sigma_i| - J_i(x).
    /// The leading component is re-identified at every evaluation as the
    /// argmax of these scores.
    fn scores(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n_c())
            .map(|i| {
                let d: Vec<f64> = x
                    .iter()
                    .zip(self.gmm.mean(i).as_slice())
                    .map(|(a, b)| a - b)
                    .collect();
                self.log_coeffs[i] - 0.5 * self.precisions[i].quad(&d)
            })
            .collect()
    }
}

/// Value and gradient of J_{k,i}(x) = 1/2 ||x - mu_i||^2_{Sigma_i^{-1}}.
pub fn component_quadratic(x: &[f64], i: usize, spec: &MixturePriorSpec) -> (f64, Vec<f64>) {
    spec.component_quadratic(x, i)
}

/// Mixture potential:
///
/// J(x) = misfit + J_(1)(x) - log(tau_(1)/sqrt|Sigma_(1)|)
///        - log(1 + sum_{i>=2} c_i(x)),
///
/// where (1) is the component maximizing tau_i |Sigma_i|^{-1/2} e^{-J_i} at
/// this x and c_i are the remaining weight ratios. Equivalently a log-sum-exp
/// over log tau_i - 1/2 log|Sigma_i| - J_i(x); the leading term is split out
/// so the logarithm only ever sees 1 + (small nonnegative terms).
pub struct MixturePotential {
    spec: MixturePriorSpec,
    observation: Observation,
    operator: std::sync::Arc<dyn ObservationOperator>,
}

impl MixturePotential {
    pub fn new(
        spec: MixturePriorSpec,
        observation: Observation,
        operator: std::sync::Arc<dyn ObservationOperator>,
    ) -> Self {
        Self {
            spec,
            observation,
            operator,
        }
    }

    pub fn spec(&self) -> &MixturePriorSpec {
        &self.spec
    }
}

impl PotentialFunction for MixturePotential {
    fn value(&self, x: &[f64]) -> f64 {
        let misfit = obs_misfit(x, &self.observation, self.operator.as_ref())
            .unwrap_or(f64::INFINITY);
        let scores = self.spec.scores(x);
        let lead = scores
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        if !lead.is_finite() {
            return f64::INFINITY;
        }
        let correction: f64 = scores.iter().map(|s| (s - lead).exp()).sum();
        misfit - lead - correction.ln()
    }

    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let mut g = obs_misfit_gradient(x, &self.observation, self.operator.as_ref());
        let n_c = self.spec.n_c();
        if n_c == 1 {
            let (_, cg) = self.spec.component_quadratic(x, 0);
            for (gi, ci) in g.iter_mut().zip(cg) {
                *gi += ci;
            }
            return g;
        }
        let scores = self.spec.scores(x);
        let lead = scores
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = scores.iter().map(|s| (s - lead).exp()).collect();
        let total: f64 = weights.iter().sum();
        for i in 0..n_c {
            let w = weights[i] / total;
            if w == 0.0 {
                continue;
            }
            let (_, cg) = self.spec.component_quadratic(x, i);
            for (gi, ci) in g.iter_mut().zip(cg) {
                *gi += w * ci;
            }
        }
        g
    }
}

/// Gaussian potential value/gradient as free functions (spec surface).
pub fn gaussian_potential(
    x: &[f64],
    spec: &GaussianPriorSpec,
    y: &Observation,
    op: &dyn ObservationOperator,
) -> Result<(f64, Vec<f64>)> {
    let d: Vec<f64> = x
        .iter()
        .zip(spec.background.as_slice())
        .map(|(a, b)| a - b)
        .collect();
    let value = 0.5 * spec.precision.quad(&d) + obs_misfit(x, y, op)?;
    let mut grad = spec.precision.apply(&d);
    for (gi, oi) in grad.iter_mut().zip(obs_misfit_gradient(x, y, op)) {
        *gi += oi;
    }
    Ok((value, grad))
}

/// Mixture potential value at `x` (spec surface; see [`MixturePotential`]).
pub fn mixture_potential(
    x: &[f64],
    spec: &MixturePriorSpec,
    y: &Observation,
    op: &dyn ObservationOperator,
) -> Result<f64> {
    let misfit = obs_misfit(x, y, op)?;
    let scores = spec.scores(x);
    let lead = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !lead.is_finite() {
        return Ok(f64::INFINITY);
    }
    let correction: f64 = scores.iter().map(|s| (s - lead).exp()).sum();
    Ok(misfit - lead - correction.ln())
}

/// Mixture potential gradient at `x` (spec surface; see [`MixturePotential`]).
pub fn mixture_potential_gradient(
    x: &[f64],
    spec: &MixturePriorSpec,
    y: &Observation,
    op: &dyn ObservationOperator,
) -> Result<Vec<f64>> {
    let mut g = obs_misfit_gradient(x, y, op);
    let scores = spec.scores(x);
    let lead = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = scores.iter().map(|s| (s - lead).exp()).collect();
    let total: f64 = weights.iter().sum();
    for i in 0..spec.n_c() {
        let w = weights[i] / total;
        if w == 0.0 {
            continue;
        }
        let (_, cg) = spec.component_quadratic(x, i);
        for (gi, ci) in g.iter_mut().zip(cg) {
            *gi += w * ci;
        }
    }
    Ok(g)
}

/// Central finite-difference gradient of an arbitrary scalar function;
/// oracle for gradient checks.
pub fn finite_difference_gradient<F: Fn(&[f64]) -> f64>(f: F, x: &[f64], step: f64) -> Vec<f64> {
    let mut g = vec![0.0; x.len()];
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        let h = step * x[i].abs().max(1.0);
        let orig = xp[i];
        xp[i] = orig + h;
        let fp = f(&xp);
        xp[i] = orig - h;
        let fm = f(&xp);
        xp[i] = orig;
        g[i] = (fp - fm) / (2.0 * h);
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensemble::CovarianceEstimate;
    use approx::assert_relative_eq;
    use rand::Rng as _;
    use std::sync::Arc;

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let num: f64 = a
            .iter()
            .zip(b)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        let den: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        num / den
    }

    #[test]
    fn obs_misfit_examples() {
        let op = IdentityOperator::new(1);
        let y = Observation::new(vec![0.5], vec![1.0]).unwrap();
        assert_eq!(obs_misfit(&[0.5], &y, &op).unwrap(), 0.0);

        // the one-dimensional example: y = -0.06858, variance 1.2, x = 0
        let y = Observation::new(vec![-0.06858], vec![1.2]).unwrap();
        let j = obs_misfit(&[0.0], &y, &op).unwrap();
        assert_relative_eq!(j, 0.5 * 0.06858f64.powi(2) / 1.2, epsilon = 1e-15);
        assert_relative_eq!(j, 1.9596e-3, max_relative = 1e-4);

        // doubling R halves the misfit
        let y2 = Observation::new(vec![-0.06858], vec![2.4]).unwrap();
        assert_relative_eq!(obs_misfit(&[0.0], &y2, &op).unwrap(), 0.5 * j);
    }

    #[test]
    fn gaussian_potential_hand_example() {
        // 1D: B=1, R=1, x^b=0, y=2, H=id, x=1 -> J = 1, grad = 0
        let spec = GaussianPriorSpec::new(
            StateVector::new(vec![0.0]).unwrap(),
            &CovarianceEstimate::Diagonal(vec![1.0]),
        )
        .unwrap();
        let y = Observation::new(vec![2.0], vec![1.0]).unwrap();
        let op = IdentityOperator::new(1);
        let (j, g) = gaussian_potential(&[1.0], &spec, &y, &op).unwrap();
        assert_relative_eq!(j, 1.0);
        assert_relative_eq!(g[0], 0.0);

        // x = x^b and H(x) = y -> J = 0, grad = 0
        let y0 = Observation::new(vec![0.0], vec![1.0]).unwrap();
        let (j, g) = gaussian_potential(&[0.0], &spec, &y0, &op).unwrap();
        assert_eq!(j, 0.0);
        assert_eq!(g[0], 0.0);
    }

    #[test]
    fn gaussian_gradient_matches_finite_differences() {
        let mut rng = crate::rng::rng_from_seed(21);
        for dim in [1usize, 3, 7] {
            let bg: Vec<f64> = (0..dim).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
            let var: Vec<f64> = (0..dim).map(|_| 0.3 + rng.random::<f64>()).collect();
            let spec = GaussianPriorSpec::new(
                StateVector::new(bg).unwrap(),
                &CovarianceEstimate::Diagonal(var),
            )
            .unwrap();
            let yv: Vec<f64> = (0..dim).map(|_| rng.random::<f64>()).collect();
            let y = Observation::with_constant_variance(yv, 1.3).unwrap();
            let op = IdentityOperator::new(dim);
            for _ in 0..5 {
                let x: Vec<f64> = (0..dim).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
                let (_, g) = gaussian_potential(&x, &spec, &y, &op).unwrap();
                let fd = finite_difference_gradient(
                    |p| gaussian_potential(p, &spec, &y, &op).unwrap().0,
                    &x,
                    1e-5,
                );
                assert!(rel_err(&g, &fd) < 1e-6, "dim {dim}: {:?} vs {:?}", g, fd);
            }
        }
    }

    fn singular_b_rejected_impl() -> Result<GaussianPriorSpec> {
        GaussianPriorSpec::new(
            StateVector::new(vec![0.0, 0.0]).unwrap(),
            &CovarianceEstimate::Diagonal(vec![1.0, 0.0]),
        )
    }

    #[test]
    fn singular_b_rejected_at_construction() {
        assert!(singular_b_rejected_impl().is_err());
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(GaussianPriorSpec::new(
            StateVector::new(vec![0.0, 0.0]).unwrap(),
            &CovarianceEstimate::Full(m),
        )
        .is_err());
    }

    fn example_mixture() -> MixturePriorSpec {
        MixturePriorSpec::new(
            GmmParams::diagonal(
                vec![0.169, 0.278, 0.229, 0.324],
                vec![vec![-2.370], vec![-0.727], vec![1.070], vec![2.436]],
                vec![vec![0.052], vec![0.423], vec![0.065], vec![0.159]],
            )
            .unwrap(),
        )
        .unwrap()
    }

    fn obs_1d() -> (Observation, IdentityOperator) {
        (
            Observation::new(vec![-0.06858], vec![1.2]).unwrap(),
            IdentityOperator::new(1),
        )
    }

    #[test]
    fn component_quadratic_examples() {
        let spec = MixturePriorSpec::new(
            GmmParams::diagonal(vec![1.0], vec![vec![1.0]], vec![vec![4.0]]).unwrap(),
        )
        .unwrap();
        let (v, g) = component_quadratic(&[1.0], 0, &spec);
        assert_eq!(v, 0.0);
        assert_eq!(g[0], 0.0);

        // 1D, Sigma=4, mu=1, x=3 -> 1/2 * 4 / 4 = 0.5, gradient 0.5
        let (v, g) = component_quadratic(&[3.0], 0, &spec);
        assert_relative_eq!(v, 0.5);
        assert_relative_eq!(g[0], 0.5);

        // quadratic scaling: doubling the offset quadruples the value
        let (v2, _) = component_quadratic(&[5.0], 0, &spec);
        assert_relative_eq!(v2, 4.0 * v);
    }

    #[test]
    fn mixture_single_component_trivial_case() {
        // n_c=1, tau=1, Sigma=I, mu=0, H=id, R=id, y=0, x=0 -> J=0
        let spec = MixturePriorSpec::new(
            GmmParams::diagonal(vec![1.0], vec![vec![0.0]], vec![vec![1.0]]).unwrap(),
        )
        .unwrap();
        let y = Observation::new(vec![0.0], vec![1.0]).unwrap();
        let op = IdentityOperator::new(1);
        assert_relative_eq!(mixture_potential(&[0.0], &spec, &y, &op).unwrap(), 0.0);
    }

    #[test]
    fn mixture_reduces_to_gaussian_up_to_constant() {
        let mu = vec![0.4];
        let var = vec![0.8];
        let spec = MixturePriorSpec::new(
            GmmParams::diagonal(vec![1.0], vec![mu.clone()], vec![var.clone()]).unwrap(),
        )
        .unwrap();
        let gspec = GaussianPriorSpec::new(
            StateVector::new(mu).unwrap(),
            &CovarianceEstimate::Diagonal(var.clone()),
        )
        .unwrap();
        let (y, op) = obs_1d();
        // expected constant: -log(tau_1 / sqrt|Sigma_1|) = 1/2 log var
        let expected = 0.5 * var[0].ln();
        let mut diffs = Vec::new();
        let mut rng = crate::rng::rng_from_seed(3);
        for _ in 0..100 {
            let x = [rng.random::<f64>() * 6.0 - 3.0];
            let jm = mixture_potential(&x, &spec, &y, &op).unwrap();
            let (jg, _) = gaussian_potential(&x, &gspec, &y, &op).unwrap();
            diffs.push(jm - jg);
        }
        let mean: f64 = diffs.iter().sum::<f64>() / diffs.len() as f64;
        assert_relative_eq!(mean, expected, epsilon = 1e-12);
        let var_of_diffs: f64 = diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>()
            / diffs.len() as f64;
        assert!(var_of_diffs < 1e-16, "variance of differences {var_of_diffs}");
    }

    #[test]
    fn mixture_well_separated_reduces_locally() {
        // at x = mu_1 of a well-separated 2-component mixture the correction
        // term is below 1e-12
        let spec = MixturePriorSpec::new(
            GmmParams::diagonal(
                vec![0.6, 0.4],
                vec![vec![-30.0], vec![30.0]],
                vec![vec![1.0], vec![1.0]],
            )
            .unwrap(),
        )
        .unwrap();
        let (y, op) = obs_1d();
        let x = [-30.0];
        let j = mixture_potential(&x, &spec, &y, &op).unwrap();
        let expected = obs_misfit(&x, &y, &op).unwrap() - (0.6f64.ln() - 0.0);
        assert!((j - expected).abs() < 1e-12);
    }

    #[test]
    fn mixture_gradient_symmetric_case() {
        let spec = MixturePriorSpec::new(
            GmmParams::diagonal(
                vec![0.5, 0.5],
                vec![vec![-1.3], vec![1.3]],
                vec![vec![0.4], vec![0.4]],
            )
            .unwrap(),
        )
        .unwrap();
        // no observation term: emulate with a huge R so the misfit vanishes
        let y = Observation::new(vec![0.0], vec![1e300]).unwrap();
        let op = IdentityOperator::new(1);
        let g = mixture_potential_gradient(&[0.0], &spec, &y, &op).unwrap();
        assert!(g[0].abs() < 1e-12, "gradient at symmetry point: {}", g[0]);
    }

    #[test]
    fn mixture_gradient_matches_finite_differences() {
        let spec = example_mixture();
        let (y, op) = obs_1d();
        let mut rng = crate::rng::rng_from_seed(17);
        for _ in 0..20 {
            let x = [rng.random::<f64>() * 6.0 - 3.0];
            let g = mixture_potential_gradient(&x, &spec, &y, &op).unwrap();
            let fd = finite_difference_gradient(
                |p| mixture_potential(p, &spec, &y, &op).unwrap(),
                &x,
                1e-5,
            );
            assert!(rel_err(&g, &fd) < 1e-6, "{:?} vs {:?}", g, fd);
        }
    }

    #[test]
    fn mixture_invariant_under_component_permutation() {
        let spec = example_mixture();
        let permuted = MixturePriorSpec::new(
            GmmParams::diagonal(
                vec![0.324, 0.229, 0.278, 0.169],
                vec![vec![2.436], vec![1.070], vec![-0.727], vec![-2.370]],
                vec![vec![0.159], vec![0.065], vec![0.423], vec![0.052]],
            )
            .unwrap(),
        )
        .unwrap();
        let (y, op) = obs_1d();
        let mut rng = crate::rng::rng_from_seed(29);
        for _ in 0..50 {
            let x = [rng.random::<f64>() * 7.0 - 3.5];
            let a = mixture_potential(&x, &spec, &y, &op).unwrap();
            let b = mixture_potential(&x, &permuted, &y, &op).unwrap();
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn mixture_matches_posterior_kernel_ratio() {
        // exp(-J(x1)) / exp(-J(x2)) equals the direct posterior-kernel ratio
        let spec = example_mixture();
        let (y, op) = obs_1d();
        let kernel = |x: f64| -> f64 {
            let like = (-0.5 * (x - y.values[0]) * (x - y.values[0]) / 1.2).exp();
            let prior: f64 = (0..spec.n_c())
                .map(|i| {
                    let mu = spec.gmm().mean(i).as_slice()[0];
                    let var = spec.gmm().covariance(i).diagonal()[0];
                    spec.gmm().weights()[i] / var.sqrt()
                        * (-0.5 * (x - mu) * (x - mu) / var).exp()
                })
                .sum();
            like * prior
        };
        let mut rng = crate::rng::rng_from_seed(31);
        for _ in 0..30 {
            let x1 = rng.random::<f64>() * 6.0 - 3.0;
            let x2 = rng.random::<f64>() * 6.0 - 3.0;
            let j1 = mixture_potential(&[x1], &spec, &y, &op).unwrap();
            let j2 = mixture_potential(&[x2], &spec, &y, &op).unwrap();
            let lhs = (j2 - j1).exp();
            let rhs = kernel(x1) / kernel(x2);
            assert_relative_eq!(lhs, rhs, max_relative = 1e-8);
        }
    }

    #[test]
    fn hybrid_prior_matches_dense_equivalent() {
        // Woodbury solve against an explicitly assembled gamma*D + AA'/(n-1)
        let mut rng = crate::rng::rng_from_seed(41);
        let n = 12;
        let n_ens = 5;
        let gamma = 0.1;
        let mut anomalies: Vec<Vec<f64>> = (0..n_ens)
            .map(|_| (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect())
            .collect();
        // center them like real ensemble anomalies
        for i in 0..n {
            let mean: f64 = anomalies.iter().map(|a| a[i]).sum::<f64>() / n_ens as f64;
            for a in anomalies.iter_mut() {
                a[i] -= mean;
            }
        }
        let bg = StateVector::new(vec![0.0; n]).unwrap();
        let hybrid =
            GaussianPriorSpec::ensemble_hybrid(bg.clone(), &anomalies, gamma, 1e-8).unwrap();

        let scale = 1.0 / (n_ens as f64 - 1.0);
        let mut full = DMatrix::<f64>::zeros(n, n);
        for a in &anomalies {
            for i in 0..n {
                for j in 0..n {
                    full[(i, j)] += a[i] * a[j] * scale;
                }
            }
        }
        for i in 0..n {
            let var = full[(i, i)];
            full[(i, i)] += gamma * var.max(1e-8);
        }
        let dense_spec =
            GaussianPriorSpec::new(bg, &CovarianceEstimate::Full(full)).unwrap();

        let y = Observation::with_constant_variance(vec![0.3; n], 2.0).unwrap();
        let op = IdentityOperator::new(n);
        for _ in 0..10 {
            let x: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
            let (jh, gh) = gaussian_potential(&x, &hybrid, &y, &op).unwrap();
            let (jd, gd) = gaussian_potential(&x, &dense_spec, &y, &op).unwrap();
            assert_relative_eq!(jh, jd, max_relative = 1e-9);
            assert!(rel_err(&gh, &gd) < 1e-9, "{gh:?} vs {gd:?}");
        }
    }

    #[test]
    fn hybrid_prior_gradient_matches_finite_differences() {
        let mut rng = crate::rng::rng_from_seed(43);
        let n = 50;
        let n_ens = 8;
        let mut anomalies: Vec<Vec<f64>> = (0..n_ens)
            .map(|_| (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect())
            .collect();
        for i in 0..n {
            let mean: f64 = anomalies.iter().map(|a| a[i]).sum::<f64>() / n_ens as f64;
            for a in anomalies.iter_mut() {
                a[i] -= mean;
            }
        }
        let bg = StateVector::new(vec![0.1; n]).unwrap();
        let spec = GaussianPriorSpec::ensemble_hybrid(bg, &anomalies, 0.1, 1e-8).unwrap();
        let y = Observation::with_constant_variance(vec![0.2; n], 1.7).unwrap();
        let op = IdentityOperator::new(n);
        for _ in 0..5 {
            let x: Vec<f64> = (0..n).map(|_| rng.random::<f64>() - 0.5).collect();
            let (_, g) = gaussian_potential(&x, &spec, &y, &op).unwrap();
            let fd = finite_difference_gradient(
                |p| gaussian_potential(p, &spec, &y, &op).unwrap().0,
                &x,
                1e-5,
            );
            assert!(rel_err(&g, &fd) < 1e-6);
        }
    }

    #[test]
    fn adjoint_identity_for_linear_operators() {
        let mut rng = crate::rng::rng_from_seed(37);
        let a = DMatrix::from_fn(3, 5, |_, _| rng.random::<f64>() * 2.0 - 1.0);
        let op = DenseLinearOperator::new(a);
        for _ in 0..20 {
            let u: Vec<f64> = (0..5).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
            let v: Vec<f64> = (0..3).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
            let hu = op.apply(&u);
            let htv = op.adjoint_apply(&u, &v);
            let lhs: f64 = hu.iter().zip(&v).map(|(a, b)| a * b).sum();
            let rhs: f64 = u.iter().zip(&htv).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0));
        }
    }
}
