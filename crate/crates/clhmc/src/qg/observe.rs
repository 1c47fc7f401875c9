//! Observation operators for the QG model: uniform-stride point observations
//! of the stream function and the nonlinear wind-speed magnitude
//! sqrt(u^2 + v^2) with u = d psi / dy, v = -d psi / dx.

use crate::error::{Error, Result};
use crate::potentials::ObservationOperator;
use crate::rng::rng_from_seed;

use super::QgGrid;

use rand::Rng as _;

/// Observe selected state components directly: apply gathers, the adjoint
/// scatters.
#[derive(Debug, Clone)]
pub struct LinearGatherOperator {
    n_var: usize,
    indices: Vec<usize>,
}

impl LinearGatherOperator {
    pub fn new(n_var: usize, indices: Vec<usize>) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::invalid("observation needs at least one index"));
        }
        if indices.iter().any(|&i| i >= n_var) {
            return Err(Error::invalid("observation index out of range"));
        }
        Ok(Self { n_var, indices })
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }
}

impl ObservationOperator for LinearGatherOperator {
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.indices.iter().map(|&i| x[i]).collect()
    }

    fn adjoint_apply(&self, _x: &[f64], v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_var];
        for (&i, &vi) in self.indices.iter().zip(v) {
            out[i] += vi;
        }
        out
    }

    fn m_obs(&self) -> usize {
        self.indices.len()
    }

    fn gather_indices(&self) -> Option<&[usize]> {
        Some(&self.indices)
    }
}

/// Uniform-stride selection of `m_obs` state components with a seeded random
/// offset: indices are offset + k * floor(n_var / m_obs), strictly increasing.
pub fn linear_obs_operator(grid: &QgGrid, m_obs: usize, seed: u64) -> Result<LinearGatherOperator> {
    let n_var = grid.n_var();
    if m_obs == 0 || m_obs > n_var {
        return Err(Error::invalid(format!(
            "m_obs = {m_obs} outside [1, {n_var}]"
        )));
    }
    let stride = n_var / m_obs;
    let mut rng = rng_from_seed(seed);
    let offset = if stride > 1 {
        rng.random_range(0..stride)
    } else {
        0
    };
    let indices = (0..m_obs).map(|k| offset + k * stride).collect();
    LinearGatherOperator::new(n_var, indices)
}

/// Wind-speed magnitude at selected grid nodes. The magnitude is regularized
/// as sqrt(u^2 + v^2 + eta^2) so its linearization stays finite at stagnation
/// points; `adjoint_apply` is the exact adjoint of that linearization.
#[derive(Debug, Clone)]
pub struct WindMagnitudeOperator {
    grid: QgGrid,
    indices: Vec<usize>,
    eta: f64,
}

const WIND_MAGNITUDE_ETA: f64 = 1e-10;

/// One-dimensional difference stencil along a grid line: central in the
/// interior, one-sided at the edges. Returns (node, weight) pairs.
fn diff_stencil(pos: usize, n: usize, step: usize, h: f64) -> [(usize, f64); 2] {
    if pos == 0 {
        [(step, 1.0 / h), (0, -1.0 / h)]
    } else if pos == n - 1 {
        [((n - 1) * step, 1.0 / h), ((n - 2) * step, -1.0 / h)]
    } else {
        [((pos + 1) * step, 0.5 / h), ((pos - 1) * step, -0.5 / h)]
    }
}

impl WindMagnitudeOperator {
    pub fn new(grid: QgGrid, indices: Vec<usize>) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::invalid("observation needs at least one index"));
        }
        if indices.iter().any(|&i| i >= grid.n_var()) {
            return Err(Error::invalid("observation index out of range"));
        }
        Ok(Self {
            grid,
            indices,
            eta: WIND_MAGNITUDE_ETA,
        })
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    /// (u, v) at one node via finite differences of psi.
    fn velocity_at(&self, psi: &[f64], index: usize) -> (f64, f64) {
        let (ix, iy) = self.grid.coords(index);
        let row = iy * self.grid.nx;
        let mut u = 0.0;
        for (off, w) in diff_stencil(iy, self.grid.ny, self.grid.nx, self.grid.dy) {
            u += w * psi[ix + off];
        }
        let mut v = 0.0;
        for (off, w) in diff_stencil(ix, self.grid.nx, 1, self.grid.dx) {
            v -= w * psi[row + off];
        }
        (u, v)
    }
}

impl ObservationOperator for WindMagnitudeOperator {
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.indices
            .iter()
            .map(|&i| {
                let (u, v) = self.velocity_at(x, i);
                (u * u + v * v + self.eta * self.eta).sqrt()
            })
            .collect()
    }

    fn adjoint_apply(&self, x: &[f64], w: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.grid.n_var()];
        for (&index, &wj) in self.indices.iter().zip(w) {
            if wj == 0.0 {
                continue;
            }
            let (u, v) = self.velocity_at(x, index);
            let mag = (u * u + v * v + self.eta * self.eta).sqrt();
            let cu = wj * u / mag;
            let cv = wj * v / mag;
            let (ix, iy) = self.grid.coords(index);
            let row = iy * self.grid.nx;
            for (off, weight) in diff_stencil(iy, self.grid.ny, self.grid.nx, self.grid.dy) {
                out[ix + off] += cu * weight;
            }
            for (off, weight) in diff_stencil(ix, self.grid.nx, 1, self.grid.dx) {
                out[row + off] -= cv * weight;
            }
        }
        out
    }

    fn m_obs(&self) -> usize {
        self.indices.len()
    }
}

/// Wind-magnitude observation network on the same uniform-stride layout as
/// [`linear_obs_operator`].
pub fn wind_magnitude_operator(
    grid: &QgGrid,
    m_obs: usize,
    seed: u64,
) -> Result<WindMagnitudeOperator> {
    let gather = linear_obs_operator(grid, m_obs, seed)?;
    WindMagnitudeOperator::new(*grid, gather.indices().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::potentials::finite_difference_gradient;
    use approx::assert_relative_eq;

    fn grid(n: usize) -> QgGrid {
        QgGrid::new(n, n).unwrap()
    }

    #[test]
    fn linear_operator_identity_when_full() {
        let g = grid(5);
        let op = linear_obs_operator(&g, g.n_var(), 3).unwrap();
        let x: Vec<f64> = (0..g.n_var()).map(|i| i as f64).collect();
        assert_eq!(op.apply(&x), x);
    }

    #[test]
    fn linear_operator_layout() {
        let g = grid(9); // n_var = 81
        let op = linear_obs_operator(&g, 10, 7).unwrap();
        let idx = op.indices();
        assert_eq!(idx.len(), 10);
        let stride = 81 / 10;
        assert!(idx[0] < stride);
        for w in idx.windows(2) {
            assert_eq!(w[1] - w[0], stride);
        }
        assert!(*idx.last().unwrap() < 81);
        // reproducible given the seed
        assert_eq!(
            linear_obs_operator(&g, 10, 7).unwrap().indices(),
            op.indices()
        );
    }

    #[test]
    fn linear_adjoint_identity() {
        use rand::Rng as _;
        let g = grid(9);
        let op = linear_obs_operator(&g, 13, 5).unwrap();
        let mut rng = crate::rng::rng_from_seed(8);
        for _ in 0..20 {
            let u: Vec<f64> = (0..g.n_var()).map(|_| rng.random::<f64>() - 0.5).collect();
            let v: Vec<f64> = (0..13).map(|_| rng.random::<f64>() - 0.5).collect();
            let hu = op.apply(&u);
            let htv = op.adjoint_apply(&u, &v);
            let lhs: f64 = hu.iter().zip(&v).map(|(a, b)| a * b).sum();
            let rhs: f64 = u.iter().zip(&htv).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-12 * lhs.abs().max(1.0));
        }
    }

    #[test]
    fn wind_magnitude_of_linear_fields() {
        let g = grid(9);
        let all: Vec<usize> = (0..g.n_var()).collect();
        let op = WindMagnitudeOperator::new(g, all).unwrap();

        // psi = y: u = 1, v = 0 -> magnitude 1 everywhere
        let mut psi = vec![0.0; g.n_var()];
        for iy in 0..g.ny {
            for ix in 0..g.nx {
                psi[g.index(ix, iy)] = iy as f64 * g.dy;
            }
        }
        for m in op.apply(&psi) {
            assert_relative_eq!(m, 1.0, epsilon = 1e-9);
        }

        // psi = x: u = 0, v = -1 -> magnitude 1
        for iy in 0..g.ny {
            for ix in 0..g.nx {
                psi[g.index(ix, iy)] = ix as f64 * g.dx;
            }
        }
        for m in op.apply(&psi) {
            assert_relative_eq!(m, 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn wind_adjoint_matches_linearization() {
        use rand::Rng as _;
        let g = grid(9);
        let op = wind_magnitude_operator(&g, 12, 11).unwrap();
        let mut rng = crate::rng::rng_from_seed(13);
        let x: Vec<f64> = (0..g.n_var()).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();

        // adjoint identity against a finite-difference directional derivative:
        // <H'(x) u, w> = <u, H'(x)' w>
        for _ in 0..10 {
            let u: Vec<f64> = (0..g.n_var()).map(|_| rng.random::<f64>() - 0.5).collect();
            let w: Vec<f64> = (0..12).map(|_| rng.random::<f64>() - 0.5).collect();
            // directional derivative of apply along u
            let eps = 1e-7;
            let xp: Vec<f64> = x.iter().zip(&u).map(|(a, b)| a + eps * b).collect();
            let xm: Vec<f64> = x.iter().zip(&u).map(|(a, b)| a - eps * b).collect();
            let hp = op.apply(&xp);
            let hm = op.apply(&xm);
            let hu: Vec<f64> = hp
                .iter()
                .zip(&hm)
                .map(|(p, m)| (p - m) / (2.0 * eps))
                .collect();
            let htw = op.adjoint_apply(&x, &w);
            let lhs: f64 = hu.iter().zip(&w).map(|(a, b)| a * b).sum();
            let rhs: f64 = u.iter().zip(&htw).map(|(a, b)| a * b).sum();
            assert!(
                (lhs - rhs).abs() < 1e-6 * lhs.abs().max(1.0),
                "adjoint identity violated: {lhs} vs {rhs}"
            );
        }

        // exact-adjoint check: gradient of w' H(x) via adjoint vs finite
        // differences of the scalar map
        let w: Vec<f64> = (0..12).map(|_| rng.random::<f64>() - 0.5).collect();
        let grad = op.adjoint_apply(&x, &w);
        let fd = finite_difference_gradient(
            |p| op.apply(p).iter().zip(&w).map(|(a, b)| a * b).sum(),
            &x,
            1e-6,
        );
        let num: f64 = grad
            .iter()
            .zip(&fd)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let den: f64 = fd.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(num / den < 1e-6, "gradient mismatch {num} / {den}");
    }
}
