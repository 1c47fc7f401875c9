//! Helmholtz solve (Delta - F) psi = q with zero Dirichlet boundaries:
//! banded Cholesky factorization at desk-scale grids, conjugate gradients
//! beyond.

use crate::error::{Error, Result};

use super::QgGrid;

/// Interior size above which the solver switches from a banded direct
/// factorization to conjugate gradients.
const DIRECT_INTERIOR_LIMIT: usize = 4096;

const CG_TOL: f64 = 1e-12;
/// Residual bound enforced on every solve (relative to the max norm of q).
pub const RESIDUAL_BOUND: f64 = 1e-8;

enum Method {
    Direct(BandedCholesky),
    ConjugateGradient,
}

/// Solver for (Delta - F) psi = q, psi = 0 on the boundary. The factorization
/// is computed once per (grid, F) and shared read-only afterwards.
pub struct HelmholtzSolver {
    grid: QgGrid,
    f: f64,
    method: Method,
}

impl HelmholtzSolver {
    pub fn new(grid: QgGrid, f: f64) -> Result<Self> {
        if !(f > 0.0) {
            return Err(Error::invalid("F must be positive"));
        }
        let n_int = (grid.nx - 2) * (grid.ny - 2);
        let method = if n_int <= DIRECT_INTERIOR_LIMIT {
            Method::Direct(BandedCholesky::build(&grid, f)?)
        } else {
            Method::ConjugateGradient
        };
        Ok(Self { grid, f, method })
    }

    /// Solve for psi given q (full fields including boundary nodes; the
    /// boundary of the result is exactly zero).
    pub fn solve(&self, q: &[f64]) -> Result<Vec<f64>> {
        let (nx, ny) = (self.grid.nx, self.grid.ny);
        if q.len() != nx * ny {
            return Err(Error::DimensionMismatch {
                expected: nx * ny,
                actual: q.len(),
            });
        }
        // interior right-hand side of (F - Delta) psi = -q
        let wx = nx - 2;
        let wy = ny - 2;
        let mut b = vec![0.0; wx * wy];
        for jy in 0..wy {
            for jx in 0..wx {
                b[jy * wx + jx] = -q[(jy + 1) * nx + (jx + 1)];
            }
        }
        let interior = match &self.method {
            Method::Direct(chol) => chol.solve(&b),
            Method::ConjugateGradient => self.cg_solve(&b)?,
        };
        let mut psi = vec![0.0; nx * ny];
        for jy in 0..wy {
            for jx in 0..wx {
                psi[(jy + 1) * nx + (jx + 1)] = interior[jy * wx + jx];
            }
        }

        // residual check: || (Delta - F) psi - q ||_inf < bound * || q ||_inf
        let q_norm = q.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if q_norm > 0.0 {
            let lap = super::laplacian(&psi, &self.grid);
            let mut res = 0.0f64;
            for iy in 1..ny - 1 {
                for ix in 1..nx - 1 {
                    let i = iy * nx + ix;
                    res = res.max((lap[i] - self.f * psi[i] - q[i]).abs());
                }
            }
            if res > RESIDUAL_BOUND * q_norm {
                return Err(Error::SolverFailure {
                    residual: res / q_norm,
                    iterations: 0,
                });
            }
        }
        Ok(psi)
    }

    /// y = (F - Delta) x on the interior grid (zero Dirichlet closure).
    fn apply_operator(&self, x: &[f64], y: &mut [f64]) {
        let nx = self.grid.nx;
        let wx = nx - 2;
        let wy = self.grid.ny - 2;
        let idx2 = 1.0 / (self.grid.dx * self.grid.dx);
        let idy2 = 1.0 / (self.grid.dy * self.grid.dy);
        let diag = self.f + 2.0 * idx2 + 2.0 * idy2;
        for jy in 0..wy {
            for jx in 0..wx {
                let i = jy * wx + jx;
                let mut v = diag * x[i];
                if jx > 0 {
                    v -= idx2 * x[i - 1];
                }
                if jx + 1 < wx {
                    v -= idx2 * x[i + 1];
                }
                if jy > 0 {
                    v -= idy2 * x[i - wx];
                }
                if jy + 1 < wy {
                    v -= idy2 * x[i + wx];
                }
                y[i] = v;
            }
        }
    }

    fn cg_solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        let n = b.len();
        let mut x = vec![0.0; n];
        let mut r = b.to_vec();
        let mut p = r.clone();
        let mut ap = vec![0.0; n];
        let b_norm2: f64 = b.iter().map(|v| v * v).sum();
        if b_norm2 == 0.0 {
            return Ok(x);
        }
        let tol2 = CG_TOL * CG_TOL * b_norm2;
        let mut rr: f64 = b_norm2;
        let max_iter = 20 * (n as f64).sqrt() as usize + 200;
        for it in 0..max_iter {
            if rr <= tol2 {
                return Ok(x);
            }
            self.apply_operator(&p, &mut ap);
            let pap: f64 = p.iter().zip(&ap).map(|(a, b)| a * b).sum();
            let alpha = rr / pap;
            for i in 0..n {
                x[i] += alpha * p[i];
                r[i] -= alpha * ap[i];
            }
            let rr_new: f64 = r.iter().map(|v| v * v).sum();
            let beta = rr_new / rr;
            rr = rr_new;
            for i in 0..n {
                p[i] = r[i] + beta * p[i];
            }
            if it == max_iter - 1 {
                return Err(Error::SolverFailure {
                    residual: (rr / b_norm2).sqrt(),
                    iterations: max_iter,
                });
            }
        }
        Ok(x)
    }
}

/// Lower-band Cholesky factor of (F - Delta) on the interior grid.
/// Bandwidth equals the interior row length; O(n w^2) to factor, O(n w) per
/// solve.
struct BandedCholesky {
    n: usize,
    w: usize,
    /// Row-major band: band[i * (w + 1) + k] = L[i, i - w + k].
    band: Vec<f64>,
}

impl BandedCholesky {
    fn build(grid: &QgGrid, f: f64) -> Result<Self> {
        let wx = grid.nx - 2;
        let wy = grid.ny - 2;
        let n = wx * wy;
        let w = wx;
        let idx2 = 1.0 / (grid.dx * grid.dx);
        let idy2 = 1.0 / (grid.dy * grid.dy);
        let diag = f + 2.0 * idx2 + 2.0 * idy2;

        let stride = w + 1;
        let mut band = vec![0.0; n * stride];
        // fill the lower band of A
        for i in 0..n {
            band[i * stride + w] = diag;
            let jx = i % wx;
            if jx > 0 {
                band[i * stride + w - 1] = -idx2;
            }
            if i >= wx {
                band[i * stride] = -idy2;
            }
        }
        // in-place banded Cholesky
        for i in 0..n {
            let lo = i.saturating_sub(w);
            for j in lo..=i {
                let mut sum = band[i * stride + (w - (i - j))];
                let k_lo = lo.max(j.saturating_sub(w));
                for k in k_lo..j {
                    sum -= band[i * stride + (w - (i - k))] * band[j * stride + (w - (j - k))];
                }
                if i == j {
                    if sum <= 0.0 {
                        return Err(Error::invalid(
                            "Helmholtz operator lost positive definiteness",
                        ));
                    }
                    band[i * stride + w] = sum.sqrt();
                } else {
                    band[i * stride + (w - (i - j))] = sum / band[j * stride + w];
                }
            }
        }
        Ok(Self { n, w, band })
    }

    fn solve(&self, b: &[f64]) -> Vec<f64> {
        let (n, w, stride) = (self.n, self.w, self.w + 1);
        let mut y = b.to_vec();
        // forward: L y = b
        for i in 0..n {
            let lo = i.saturating_sub(w);
            let mut sum = y[i];
            for k in lo..i {
                sum -= self.band[i * stride + (w - (i - k))] * y[k];
            }
            y[i] = sum / self.band[i * stride + w];
        }
        // backward: L' x = y
        for i in (0..n).rev() {
            let hi = (i + w).min(n - 1);
            let mut sum = y[i];
            for k in i + 1..=hi {
                sum -= self.band[k * stride + (w - (k - i))] * y[k];
            }
            y[i] = sum / self.band[i * stride + w];
        }
        y
    }
}
