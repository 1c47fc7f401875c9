//! State-vector and ensemble primitives shared by all filters: moments,
//! weighted norms, covariance localization, and inflation.

use std::io::{BufRead, Write};

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// A model state: a finite real vector of fixed length.
#[derive(Debug, Clone, PartialEq)]
pub struct StateVector {
    values: Vec<f64>,
}

impl StateVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("state vector must be non-empty"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("state vector contains non-finite entries"));
        }
        Ok(Self { values })
    }

    /// Wrap without the finiteness check. Callers must guarantee finite input.
    pub(crate) fn from_raw(values: Vec<f64>) -> Self {
        Self { values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }
}

impl std::ops::Index<usize> for StateVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.values[i]
    }
}

impl AsRef<[f64]> for StateVector {
    fn as_ref(&self) -> &[f64] {
        &self.values
    }
}

/// A set of state vectors sampled from a forecast or analysis distribution.
#[derive(Debug, Clone)]
pub struct Ensemble {
    members: Vec<StateVector>,
    time_index: usize,
}

impl Ensemble {
    /// Statistical operations (covariance, inflation) additionally require
    /// n_ens >= 2; single-member ensembles arise only as per-chain slices.
    pub fn new(members: Vec<StateVector>, time_index: usize) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::invalid("ensemble needs at least 1 member"));
        }
        let n = members[0].len();
        if members.iter().any(|m| m.len() != n) {
            return Err(Error::invalid("ensemble members have differing lengths"));
        }
        Ok(Self {
            members,
            time_index,
        })
    }

    /// Build from raw rows; checks finiteness via `StateVector::new`.
    pub fn from_rows(rows: Vec<Vec<f64>>, time_index: usize) -> Result<Self> {
        let members = rows
            .into_iter()
            .map(StateVector::new)
            .collect::<Result<Vec<_>>>()?;
        Self::new(members, time_index)
    }

    pub fn n_ens(&self) -> usize {
        self.members.len()
    }

    pub fn n_var(&self) -> usize {
        self.members[0].len()
    }

    pub fn members(&self) -> &[StateVector] {
        &self.members
    }

    pub fn member(&self, e: usize) -> &StateVector {
        &self.members[e]
    }

    pub fn time_index(&self) -> usize {
        self.time_index
    }

    pub fn set_time_index(&mut self, k: usize) {
        self.time_index = k;
    }

    /// Serialize as CSV: header `member_id,x_0,...,x_{n-1}`, one member per row.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        write!(w, "member_id")?;
        for j in 0..self.n_var() {
            write!(w, ",x_{j}")?;
        }
        writeln!(w)?;
        for (e, m) in self.members.iter().enumerate() {
            write!(w, "{e}")?;
            for v in m.as_slice() {
                write!(w, ",{v}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R, time_index: usize) -> Result<Self> {
        let mut rows = Vec::new();
        for (lineno, line) in r.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if lineno == 0 && line.starts_with("member_id") {
                continue;
            }
            let mut fields = line.split(',');
            let _id = fields.next();
            let row = fields
                .map(|f| {
                    f.trim()
                        .parse::<f64>()
                        .map_err(|e| Error::invalid(format!("line {}: {e}", lineno + 1)))
                })
                .collect::<Result<Vec<f64>>>()?;
            rows.push(row);
        }
        Ensemble::from_rows(rows, time_index)
    }
}

/// Covariance estimate: full matrix or the diagonal of one.
#[derive(Debug, Clone)]
pub enum CovarianceEstimate {
    Full(DMatrix<f64>),
    Diagonal(Vec<f64>),
}

impl CovarianceEstimate {
    pub fn dim(&self) -> usize {
        match self {
            CovarianceEstimate::Full(m) => m.nrows(),
            CovarianceEstimate::Diagonal(d) => d.len(),
        }
    }

    pub fn is_diagonal(&self) -> bool {
        matches!(self, CovarianceEstimate::Diagonal(_))
    }

    /// The diagonal (variances) regardless of representation.
    pub fn diagonal(&self) -> Vec<f64> {
        match self {
            CovarianceEstimate::Full(m) => (0..m.nrows()).map(|i| m[(i, i)]).collect(),
            CovarianceEstimate::Diagonal(d) => d.clone(),
        }
    }

    pub fn entry(&self, i: usize, j: usize) -> f64 {
        match self {
            CovarianceEstimate::Full(m) => m[(i, j)],
            CovarianceEstimate::Diagonal(d) => {
                if i == j {
                    d[i]
                } else {
                    0.0
                }
            }
        }
    }
}

/// A measurement vector with independent (diagonal) error variances.
#[derive(Debug, Clone)]
pub struct Observation {
    pub values: Vec<f64>,
    pub error_variances: Vec<f64>,
}

impl Observation {
    pub fn new(values: Vec<f64>, error_variances: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("observation must have m_obs >= 1"));
        }
        if values.len() != error_variances.len() {
            return Err(Error::DimensionMismatch {
                expected: values.len(),
                actual: error_variances.len(),
            });
        }
        if error_variances.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::invalid("observation error variances must be > 0"));
        }
        Ok(Self {
            values,
            error_variances,
        })
    }

    /// Constant error variance across all components.
    pub fn with_constant_variance(values: Vec<f64>, variance: f64) -> Result<Self> {
        let n = values.len();
        Self::new(values, vec![variance; n])
    }

    pub fn m_obs(&self) -> usize {
        self.values.len()
    }
}

/// Componentwise arithmetic mean of the members.
pub fn ensemble_mean(ens: &Ensemble) -> StateVector {
    let n = ens.n_var();
    let mut mean = vec![0.0; n];
    for m in ens.members() {
        for (acc, v) in mean.iter_mut().zip(m.as_slice()) {
            *acc += v;
        }
    }
    let inv = 1.0 / ens.n_ens() as f64;
    for v in &mut mean {
        *v *= inv;
    }
    StateVector::from_raw(mean)
}

/// Unbiased sample covariance (divisor n_ens - 1).
pub fn ensemble_covariance(ens: &Ensemble, diagonal_only: bool) -> Result<CovarianceEstimate> {
    let n_ens = ens.n_ens();
    if n_ens < 2 {
        return Err(Error::invalid("sample covariance needs n_ens >= 2"));
    }
    let n = ens.n_var();
    let mean = ensemble_mean(ens);
    let scale = 1.0 / (n_ens as f64 - 1.0);
    if diagonal_only {
        let mut var = vec![0.0; n];
        for m in ens.members() {
            for ((acc, &v), &mu) in var.iter_mut().zip(m.as_slice()).zip(mean.as_slice()) {
                let d = v - mu;
                *acc += d * d;
            }
        }
        for v in &mut var {
            *v *= scale;
        }
        Ok(CovarianceEstimate::Diagonal(var))
    } else {
        let mut cov = DMatrix::zeros(n, n);
        for m in ens.members() {
            let a: Vec<f64> = m
                .as_slice()
                .iter()
                .zip(mean.as_slice())
                .map(|(v, mu)| v - mu)
                .collect();
            for i in 0..n {
                for j in i..n {
                    cov[(i, j)] += a[i] * a[j];
                }
            }
        }
        for i in 0..n {
            for j in i..n {
                let v = cov[(i, j)] * scale;
                cov[(i, j)] = v;
                cov[(j, i)] = v;
            }
        }
        Ok(CovarianceEstimate::Full(cov))
    }
}

/// Anomalies (member - mean), one row per member.
pub fn ensemble_anomalies(ens: &Ensemble) -> (StateVector, Vec<Vec<f64>>) {
    let mean = ensemble_mean(ens);
    let anomalies = ens
        .members()
        .iter()
        .map(|m| {
            m.as_slice()
                .iter()
                .zip(mean.as_slice())
                .map(|(v, mu)| v - mu)
                .collect()
        })
        .collect();
    (mean, anomalies)
}

/// Weighted squared norm (a-b)' C (a-b) where `c` is the supplied
/// inverse-covariance (weight) matrix.
pub fn weighted_norm_sq(a: &[f64], b: &[f64], c: &CovarianceEstimate) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            actual: b.len(),
        });
    }
    if c.dim() != a.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            actual: c.dim(),
        });
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let v = match c {
        CovarianceEstimate::Diagonal(w) => d.iter().zip(w).map(|(x, wi)| x * x * wi).sum(),
        CovarianceEstimate::Full(m) => {
            let dv = nalgebra::DVector::from_column_slice(&d);
            (dv.transpose() * m * &dv)[(0, 0)]
        }
    };
    Ok(v)
}

/// Gaspari-Cohn fifth-order piecewise rational correlation function with
/// compact support `2 * radius`. Returns 1 at distance 0 and 0 beyond the
/// support; continuous and monotone nonincreasing in between.
pub fn gaspari_cohn(distance: f64, radius: f64) -> Result<f64> {
    if distance < 0.0 {
        return Err(Error::invalid("distance must be >= 0"));
    }
    if !(radius > 0.0) {
        return Err(Error::invalid("radius must be > 0"));
    }
    let z = distance / radius;
    let w = if z <= 1.0 {
        let z2 = z * z;
        let z3 = z2 * z;
        -0.25 * z3 * z2 + 0.5 * z2 * z2 + 0.625 * z3 - (5.0 / 3.0) * z2 + 1.0
    } else if z <= 2.0 {
        let z2 = z * z;
        let z3 = z2 * z;
        (1.0 / 12.0) * z3 * z2 - 0.5 * z2 * z2 + 0.625 * z3 + (5.0 / 3.0) * z2 - 5.0 * z + 4.0
            - (2.0 / 3.0) / z
    } else {
        0.0
    };
    // Clamp tiny negative roundoff near the support boundary.
    Ok(w.max(0.0))
}

/// Hadamard product of a full covariance with Gaspari-Cohn weights of the
/// pairwise distances. Diagonal covariances are returned unchanged
/// (localization is a no-op on diagonals).
pub fn apply_localization<F>(
    cov: &CovarianceEstimate,
    grid_distance: F,
    radius: f64,
) -> Result<CovarianceEstimate>
where
    F: Fn(usize, usize) -> f64,
{
    match cov {
        CovarianceEstimate::Diagonal(d) => Ok(CovarianceEstimate::Diagonal(d.clone())),
        CovarianceEstimate::Full(m) => {
            let n = m.nrows();
            let mut out = DMatrix::zeros(n, n);
            for i in 0..n {
                for j in i..n {
                    let w = gaspari_cohn(grid_distance(i, j), radius)?;
                    let v = m[(i, j)] * w;
                    out[(i, j)] = v;
                    out[(j, i)] = v;
                }
            }
            Ok(CovarianceEstimate::Full(out))
        }
    }
}

/// Scale ensemble anomalies by `delta` about the (exactly preserved) mean.
pub fn inflate(ens: &Ensemble, delta: f64) -> Result<Ensemble> {
    if delta < 1.0 {
        return Err(Error::invalid("inflation factor must be >= 1"));
    }
    let mean = ensemble_mean(ens);
    let members = ens
        .members()
        .iter()
        .map(|m| {
            let row = m
                .as_slice()
                .iter()
                .zip(mean.as_slice())
                .map(|(v, mu)| mu + delta * (v - mu))
                .collect();
            StateVector::from_raw(row)
        })
        .collect();
    Ensemble::new(members, ens.time_index())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng as _;

    fn ens(rows: &[&[f64]]) -> Ensemble {
        Ensemble::from_rows(rows.iter().map(|r| r.to_vec()).collect(), 0).unwrap()
    }

    #[test]
    fn mean_symmetry_and_identity() {
        let e = ens(&[&[0.0, 0.0], &[2.0, 2.0]]);
        assert_eq!(ensemble_mean(&e).as_slice(), &[1.0, 1.0]);

        let v = vec![0.3, -1.7, 4.0];
        let e = Ensemble::from_rows(vec![v.clone(); 5], 0).unwrap();
        for (m, x) in ensemble_mean(&e).as_slice().iter().zip(&v) {
            assert_relative_eq!(m, x, epsilon = 1e-15);
        }
    }

    #[test]
    fn mean_monte_carlo_bound() {
        use rand_distr::Distribution;
        let mut rng = crate::rng::rng_from_seed(7);
        let rows: Vec<Vec<f64>> = (0..100)
            .map(|_| {
                (0..3)
                    .map(|_| rand_distr::StandardNormal.sample(&mut rng))
                    .collect()
            })
            .collect();
        let e = Ensemble::from_rows(rows, 0).unwrap();
        for &m in ensemble_mean(&e).as_slice() {
            assert!(m.abs() < 3.0 / 100f64.sqrt(), "mean {m} outside 3/sqrt(n)");
        }
    }

    #[test]
    fn covariance_examples() {
        // members (-1), (1) in 1D -> variance 2 with divisor n-1
        let e = ens(&[&[-1.0], &[1.0]]);
        match ensemble_covariance(&e, false).unwrap() {
            CovarianceEstimate::Full(m) => assert_relative_eq!(m[(0, 0)], 2.0),
            _ => panic!("expected full"),
        }
        // identical members -> zero matrix
        let e = Ensemble::from_rows(vec![vec![3.0, -1.0]; 4], 0).unwrap();
        match ensemble_covariance(&e, false).unwrap() {
            CovarianceEstimate::Full(m) => assert!(m.iter().all(|&v| v == 0.0)),
            _ => panic!("expected full"),
        }
    }

    #[test]
    fn diagonal_matches_full_diagonal() {
        let mut rng = crate::rng::rng_from_seed(11);
        let rows: Vec<Vec<f64>> = (0..30)
            .map(|_| {
                let x: f64 = rng.random::<f64>() * 2.0 - 1.0;
                vec![x, 0.5 * x + rng.random::<f64>()]
            })
            .collect();
        let e = Ensemble::from_rows(rows, 0).unwrap();
        let full = ensemble_covariance(&e, false).unwrap();
        let diag = ensemble_covariance(&e, true).unwrap();
        for i in 0..2 {
            assert_relative_eq!(diag.entry(i, i), full.entry(i, i), epsilon = 1e-14);
        }
    }

    #[test]
    fn weighted_norm_examples() {
        let id = CovarianceEstimate::Diagonal(vec![1.0, 1.0]);
        assert_eq!(
            weighted_norm_sq(&[1.0, 2.0], &[1.0, 2.0], &id).unwrap(),
            0.0
        );
        assert_relative_eq!(
            weighted_norm_sq(&[1.0, 0.0], &[0.0, 0.0], &id).unwrap(),
            1.0
        );
        let c = CovarianceEstimate::Diagonal(vec![2.0, 0.5]);
        assert_relative_eq!(
            weighted_norm_sq(&[1.0, 2.0], &[0.0, 0.0], &c).unwrap(),
            4.0
        );
        assert!(weighted_norm_sq(&[1.0], &[0.0, 0.0], &id).is_err());
    }

    #[test]
    fn gaspari_cohn_values() {
        assert_relative_eq!(gaspari_cohn(0.0, 1.0).unwrap(), 1.0);
        assert_relative_eq!(gaspari_cohn(2.0, 1.0).unwrap(), 0.0, epsilon = 1e-15);
        // value at distance == radius: -1/4 + 1/2 + 5/8 - 5/3 + 1
        let expected = -0.25 + 0.5 + 0.625 - 5.0 / 3.0 + 1.0;
        assert_relative_eq!(gaspari_cohn(1.0, 1.0).unwrap(), expected, epsilon = 1e-15);
        assert!(gaspari_cohn(-0.1, 1.0).is_err());
    }

    #[test]
    fn gaspari_cohn_breakpoint_continuity() {
        for c in [0.7, 1.0, 12.0] {
            for z in [1.0, 2.0] {
                let d = z * c;
                let left = gaspari_cohn(d - 1e-9 * c, c).unwrap();
                let right = gaspari_cohn(d + 1e-9 * c, c).unwrap();
                assert!((left - right).abs() < 1e-7, "jump at z={z}");
            }
        }
        // tighter: evaluate both branch polynomials exactly at z=1
        let z: f64 = 1.0;
        let inner = -0.25 * z.powi(5) + 0.5 * z.powi(4) + 0.625 * z.powi(3) - 5.0 / 3.0 * z * z
            + 1.0;
        let outer = z.powi(5) / 12.0 - 0.5 * z.powi(4) + 0.625 * z.powi(3) + 5.0 / 3.0 * z * z
            - 5.0 * z
            + 4.0
            - 2.0 / (3.0 * z);
        assert!((inner - outer).abs() < 1e-12);
    }

    #[test]
    fn localization_examples() {
        let m = DMatrix::from_row_slice(3, 3, &[4.0, 2.0, 1.0, 2.0, 3.0, 0.5, 1.0, 0.5, 2.0]);
        let cov = CovarianceEstimate::Full(m.clone());
        let dist = |i: usize, j: usize| (i as f64 - j as f64).abs();

        // huge radius: unchanged
        let loc = apply_localization(&cov, dist, 1e12).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_relative_eq!(loc.entry(i, j), m[(i, j)], epsilon = 1e-9);
            }
        }

        // radius 1: distances {0,1,2} scaled by {1, GC(1), 0}
        let loc = apply_localization(&cov, dist, 1.0).unwrap();
        let g1 = gaspari_cohn(1.0, 1.0).unwrap();
        assert_relative_eq!(loc.entry(0, 0), 4.0);
        assert_relative_eq!(loc.entry(0, 1), 2.0 * g1);
        assert_relative_eq!(loc.entry(0, 2), 0.0);
        assert_relative_eq!(loc.entry(2, 0), 0.0);

        // diagonal input: unchanged
        let d = CovarianceEstimate::Diagonal(vec![1.0, 2.0]);
        let out = apply_localization(&d, dist, 1.0).unwrap();
        assert!(out.is_diagonal());
        assert_eq!(out.diagonal(), vec![1.0, 2.0]);
    }

    #[test]
    fn localization_keeps_psd_on_regular_grid() {
        // random 20x20 covariances on a 1D regular grid stay PSD under GC
        let mut rng = crate::rng::rng_from_seed(5);
        for _ in 0..5 {
            let n = 20;
            let a = DMatrix::from_fn(n, n, |_, _| rng.random::<f64>() * 2.0 - 1.0);
            let cov = CovarianceEstimate::Full(&a * a.transpose());
            let loc = apply_localization(&cov, |i, j| (i as f64 - j as f64).abs(), 4.0).unwrap();
            let m = match loc {
                CovarianceEstimate::Full(m) => m,
                _ => unreachable!(),
            };
            assert_eq!(m.clone().transpose(), m); // symmetric
            let eig = m.symmetric_eigenvalues();
            let min = eig.iter().cloned().fold(f64::INFINITY, f64::min);
            let scale = eig.iter().cloned().fold(0.0f64, f64::max).max(1.0);
            assert!(min >= -1e-8 * scale, "smallest eigenvalue {min}");
        }
    }

    #[test]
    fn inflate_examples() {
        let e = ens(&[&[0.0], &[2.0]]);
        let same = inflate(&e, 1.0).unwrap();
        assert_eq!(same.member(0).as_slice(), &[0.0]);
        assert_eq!(same.member(1).as_slice(), &[2.0]);

        let doubled = inflate(&e, 2.0).unwrap();
        assert_eq!(doubled.member(0).as_slice(), &[-1.0]);
        assert_eq!(doubled.member(1).as_slice(), &[3.0]);
        assert_relative_eq!(ensemble_mean(&doubled).as_slice()[0], 1.0);

        assert!(inflate(&e, 0.9).is_err());
    }

    #[test]
    fn inflate_scales_covariance_by_delta_squared() {
        let mut rng = crate::rng::rng_from_seed(3);
        let rows: Vec<Vec<f64>> = (0..12)
            .map(|_| (0..3).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect())
            .collect();
        let e = Ensemble::from_rows(rows, 0).unwrap();
        let delta = 1.06;
        let inflated = inflate(&e, delta).unwrap();
        let c0 = ensemble_covariance(&e, false).unwrap();
        let c1 = ensemble_covariance(&inflated, false).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_relative_eq!(
                    c1.entry(i, j),
                    delta * delta * c0.entry(i, j),
                    epsilon = 1e-12,
                    max_relative = 1e-10
                );
            }
        }
        // mean preserved to < 1e-12 relative
        let m0 = ensemble_mean(&e);
        let m1 = ensemble_mean(&inflated);
        for (a, b) in m0.as_slice().iter().zip(m1.as_slice()) {
            assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }
    }

    #[test]
    fn csv_round_trip() {
        let e = ens(&[&[1.5, -2.0], &[0.25, 3.0]]);
        let mut buf = Vec::new();
        e.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("member_id,x_0,x_1\n"));
        let back = Ensemble::read_csv(std::io::Cursor::new(buf), 0).unwrap();
        assert_eq!(back.n_ens(), 2);
        assert_eq!(back.member(0).as_slice(), e.member(0).as_slice());
        assert_eq!(back.member(1).as_slice(), e.member(1).as_slice());
    }
}
