//! The QG-1.5 testbed: a 1.5-layer reduced-gravity quasi-geostrophic model
//! with double-gyre wind forcing and biharmonic friction,
//!
//!   q_t = psi_x - eps J(psi, q) - A Delta^3 psi + 2 pi sin(2 pi y),
//!   q   = Delta psi - F psi,
//!
//! on the unit square with psi = Delta psi = Delta^2 psi = 0 on the boundary,
//! discretized by second-order stencils, an energy/enstrophy-conserving
//! Arakawa Jacobian, and RK4 time stepping.

mod observe;
mod solver;

pub use observe::{
    linear_obs_operator, wind_magnitude_operator, LinearGatherOperator, WindMagnitudeOperator,
};
pub use solver::HelmholtzSolver;

use std::io::{Read, Write};

use crate::ensemble::StateVector;
use crate::error::{Error, Result};
use crate::filters::ModelPropagator;

/// Grid geometry: node counts including boundaries, spacings on the unit
/// square. State vectors are row-major: index = iy * nx + ix.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct QgGrid {
    pub nx: usize,
    pub ny: usize,
    pub dx: f64,
    pub dy: f64,
}

impl QgGrid {
    pub fn new(nx: usize, ny: usize) -> Result<Self> {
        if nx < 5 || ny < 5 {
            return Err(Error::invalid(
                "grid needs nx, ny >= 5 (biharmonic stencils need 2-deep halos)",
            ));
        }
        Ok(Self {
            nx,
            ny,
            dx: 1.0 / (nx - 1) as f64,
            dy: 1.0 / (ny - 1) as f64,
        })
    }

    pub fn n_var(&self) -> usize {
        self.nx * self.ny
    }

    pub fn index(&self, ix: usize, iy: usize) -> usize {
        iy * self.nx + ix
    }

    pub fn coords(&self, index: usize) -> (usize, usize) {
        (index % self.nx, index / self.nx)
    }

    pub fn is_boundary(&self, index: usize) -> bool {
        let (ix, iy) = self.coords(index);
        ix == 0 || iy == 0 || ix == self.nx - 1 || iy == self.ny - 1
    }

    /// Euclidean distance between two state indices in grid-cell units.
    pub fn cell_distance(&self, i: usize, j: usize) -> f64 {
        let (ix, iy) = self.coords(i);
        let (jx, jy) = self.coords(j);
        let dx = ix as f64 - jx as f64;
        let dy = iy as f64 - jy as f64;
        (dx * dx + dy * dy).sqrt()
    }

    /// Zero the boundary nodes of a field.
    pub fn enforce_boundary(&self, field: &mut [f64]) {
        let (nx, ny) = (self.nx, self.ny);
        for ix in 0..nx {
            field[ix] = 0.0;
            field[(ny - 1) * nx + ix] = 0.0;
        }
        for iy in 0..ny {
            field[iy * nx] = 0.0;
            field[iy * nx + nx - 1] = 0.0;
        }
    }
}

/// Physical constants and the time step.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QgParams {
    pub f: f64,
    pub epsilon: f64,
    pub a: f64,
    pub dt: f64,
    /// Sign applied to the psi_x term; +1 as printed in the model equations.
    pub beta_sign: f64,
}

impl Default for QgParams {
    fn default() -> Self {
        Self {
            f: 1600.0,
            epsilon: 1e-5,
            a: 2e-12,
            dt: 1.25,
            beta_sign: 1.0,
        }
    }
}

impl QgParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.f > 0.0) || !(self.epsilon > 0.0) || !(self.a > 0.0) || !(self.dt > 0.0) {
            return Err(Error::invalid("QG parameters F, eps, A, dt must be positive"));
        }
        Ok(())
    }
}

/// A stream-function field on a grid.
#[derive(Debug, Clone)]
pub struct QgState {
    pub psi: Vec<f64>,
    pub grid: QgGrid,
}

impl QgState {
    pub fn zeros(grid: QgGrid) -> Self {
        Self {
            psi: vec![0.0; grid.n_var()],
            grid,
        }
    }

    pub fn from_state_vector(sv: &StateVector, grid: QgGrid) -> Result<Self> {
        if sv.len() != grid.n_var() {
            return Err(Error::DimensionMismatch {
                expected: grid.n_var(),
                actual: sv.len(),
            });
        }
        let mut psi = sv.as_slice().to_vec();
        grid.enforce_boundary(&mut psi);
        Ok(Self { psi, grid })
    }
}

/// Standard 5-point Laplacian. Interior nodes use the input values as-is;
/// boundary nodes of the output are zero, which is exactly the closure
/// psi = Delta psi = Delta^2 psi = 0 needs when the operator is composed.
pub fn laplacian(field: &[f64], grid: &QgGrid) -> Vec<f64> {
    let (nx, ny) = (grid.nx, grid.ny);
    let idx2 = 1.0 / (grid.dx * grid.dx);
    let idy2 = 1.0 / (grid.dy * grid.dy);
    let mut out = vec![0.0; nx * ny];
    for iy in 1..ny - 1 {
        for ix in 1..nx - 1 {
            let i = iy * nx + ix;
            out[i] = (field[i - 1] - 2.0 * field[i] + field[i + 1]) * idx2
                + (field[i - nx] - 2.0 * field[i] + field[i + nx]) * idy2;
        }
    }
    out
}

/// Central x-derivative on the interior, zero on the boundary.
fn d_dx_interior(field: &[f64], grid: &QgGrid) -> Vec<f64> {
    let (nx, ny) = (grid.nx, grid.ny);
    let half = 0.5 / grid.dx;
    let mut out = vec![0.0; nx * ny];
    for iy in 1..ny - 1 {
        for ix in 1..nx - 1 {
            let i = iy * nx + ix;
            out[i] = (field[i + 1] - field[i - 1]) * half;
        }
    }
    out
}

/// q = Delta psi - F psi.
pub fn vorticity_from_psi(psi: &[f64], grid: &QgGrid, f: f64) -> Vec<f64> {
    let lap = laplacian(psi, grid);
    lap.iter().zip(psi).map(|(l, p)| l - f * p).collect()
}

/// Invert q = (Delta - F) psi with zero Dirichlet boundary. Convenience
/// wrapper that factors the operator on every call; time stepping reuses a
/// cached [`HelmholtzSolver`].
pub fn psi_from_vorticity(q: &[f64], grid: &QgGrid, f: f64) -> Result<Vec<f64>> {
    HelmholtzSolver::new(*grid, f)?.solve(q)
}

/// Arakawa's energy/enstrophy-conserving discretization of the advection
/// Jacobian psi_x q_y - psi_y q_x (the average of the three 9-point forms).
/// Zero on the boundary.
pub fn jacobian_term(psi: &[f64], q: &[f64], grid: &QgGrid) -> Vec<f64> {
    let (nx, ny) = (grid.nx, grid.ny);
    let scale = 1.0 / (12.0 * grid.dx * grid.dy);
    let mut out = vec![0.0; nx * ny];
    for iy in 1..ny - 1 {
        for ix in 1..nx - 1 {
            let i = iy * nx + ix;
            let (e, w, n, s) = (i + 1, i - 1, i + nx, i - nx);
            let (ne, nw, se, sw) = (i + nx + 1, i + nx - 1, i - nx + 1, i - nx - 1);

            let j1 = (psi[e] - psi[w]) * (q[n] - q[s]) - (psi[n] - psi[s]) * (q[e] - q[w]);
            let j2 = psi[e] * (q[ne] - q[se]) - psi[w] * (q[nw] - q[sw])
                - psi[n] * (q[ne] - q[nw])
                + psi[s] * (q[se] - q[sw]);
            let j3 = psi[ne] * (q[n] - q[e]) - psi[sw] * (q[w] - q[s])
                - psi[nw] * (q[n] - q[w])
                + psi[se] * (q[e] - q[s]);

            out[i] = (j1 + j2 + j3) * scale;
        }
    }
    out
}

/// Right-hand side q_t = psi_x - eps J(psi, q) - A Delta^3 psi + 2 pi
/// sin(2 pi y), assembled from a fresh Helmholtz inversion of q. Zero on the
/// boundary.
pub fn qg_tendency(q: &[f64], grid: &QgGrid, params: &QgParams) -> Result<Vec<f64>> {
    let solver = HelmholtzSolver::new(*grid, params.f)?;
    qg_tendency_with(q, grid, params, &solver)
}

/// Tendency with a caller-supplied (cached) Helmholtz solver.
pub fn qg_tendency_with(
    q: &[f64],
    grid: &QgGrid,
    params: &QgParams,
    solver: &HelmholtzSolver,
) -> Result<Vec<f64>> {
    let psi = solver.solve(q)?;
    let psi_x = d_dx_interior(&psi, grid);
    let jac = jacobian_term(&psi, q, grid);
    let lap3 = laplacian(&laplacian(&laplacian(&psi, grid), grid), grid);

    let (nx, ny) = (grid.nx, grid.ny);
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut out = vec![0.0; nx * ny];
    for iy in 1..ny - 1 {
        let forcing = two_pi * (two_pi * iy as f64 * grid.dy).sin();
        for ix in 1..nx - 1 {
            let i = iy * nx + ix;
            out[i] =
                params.beta_sign * psi_x[i] - params.epsilon * jac[i] - params.a * lap3[i] + forcing;
        }
    }
    Ok(out)
}

/// Classical RK4 for an arbitrary field tendency; used directly by the model
/// step and by oracle tests with stubbed right-hand sides.
pub fn rk4_generic<F>(q: &[f64], dt: f64, tendency: F) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    let n = q.len();
    let k1 = tendency(q)?;
    let mut tmp: Vec<f64> = (0..n).map(|i| q[i] + 0.5 * dt * k1[i]).collect();
    let k2 = tendency(&tmp)?;
    for i in 0..n {
        tmp[i] = q[i] + 0.5 * dt * k2[i];
    }
    let k3 = tendency(&tmp)?;
    for i in 0..n {
        tmp[i] = q[i] + dt * k3[i];
    }
    let k4 = tendency(&tmp)?;
    let out: Vec<f64> = (0..n)
        .map(|i| q[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect();
    Ok(out)
}

/// One RK4 step of the vorticity equation; boundary conditions re-enforced,
/// non-finite results rejected.
pub fn rk4_step(q: &[f64], grid: &QgGrid, params: &QgParams) -> Result<Vec<f64>> {
    let solver = HelmholtzSolver::new(*grid, params.f)?;
    rk4_step_with(q, grid, params, &solver)
}

fn rk4_step_with(
    q: &[f64],
    grid: &QgGrid,
    params: &QgParams,
    solver: &HelmholtzSolver,
) -> Result<Vec<f64>> {
    let mut out = rk4_generic(q, params.dt, |state| {
        qg_tendency_with(state, grid, params, solver)
    })?;
    grid.enforce_boundary(&mut out);
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::ModelBlowUp);
    }
    Ok(out)
}

/// The QG model with a cached Helmholtz factorization; propagates
/// stream-function states. Implements [`ModelPropagator`] where t is measured
/// in model steps.
pub struct QgModel {
    grid: QgGrid,
    params: QgParams,
    solver: HelmholtzSolver,
}

impl QgModel {
    pub fn new(grid: QgGrid, params: QgParams) -> Result<Self> {
        params.validate()?;
        let solver = HelmholtzSolver::new(grid, params.f)?;
        Ok(Self {
            grid,
            params,
            solver,
        })
    }

    pub fn grid(&self) -> &QgGrid {
        &self.grid
    }

    pub fn params(&self) -> &QgParams {
        &self.params
    }

    /// Advance a stream-function field by `n_steps` model steps. The state
    /// converts to vorticity once, steps there, and converts back.
    pub fn advance_psi(&self, psi: &[f64], n_steps: usize) -> Result<Vec<f64>> {
        if n_steps == 0 {
            return Ok(psi.to_vec());
        }
        let mut work = psi.to_vec();
        self.grid.enforce_boundary(&mut work);
        let mut q = vorticity_from_psi(&work, &self.grid, self.params.f);
        for _ in 0..n_steps {
            q = rk4_step_with(&q, &self.grid, &self.params, &self.solver)?;
        }
        let mut psi_out = self.solver.solve(&q)?;
        self.grid.enforce_boundary(&mut psi_out);
        Ok(psi_out)
    }
}

impl ModelPropagator for QgModel {
    fn advance(&self, state: &StateVector, t_from: f64, t_to: f64) -> Result<StateVector> {
        if t_to < t_from {
            return Err(Error::invalid("cannot integrate backward in time"));
        }
        let steps = (t_to - t_from).round() as usize;
        let psi = self.advance_psi(state.as_slice(), steps)?;
        StateVector::new(psi)
    }
}

const QG1_MAGIC: &[u8; 3] = b"QG1";

/// Write a field in the `QG1` checkpoint format: magic, nx, ny as 32-bit
/// little-endian, then 64-bit little-endian floats row-major.
pub fn write_qg1<W: Write>(mut w: W, grid: &QgGrid, field: &[f64]) -> Result<()> {
    if field.len() != grid.n_var() {
        return Err(Error::DimensionMismatch {
            expected: grid.n_var(),
            actual: field.len(),
        });
    }
    w.write_all(QG1_MAGIC)?;
    w.write_all(&(grid.nx as u32).to_le_bytes())?;
    w.write_all(&(grid.ny as u32).to_le_bytes())?;
    for v in field {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Read a `QG1` checkpoint; returns the grid dimensions and the field.
pub fn read_qg1<R: Read>(mut r: R) -> Result<(usize, usize, Vec<f64>)> {
    let mut magic = [0u8; 3];
    r.read_exact(&mut magic)?;
    if &magic != QG1_MAGIC {
        return Err(Error::invalid("not a QG1 checkpoint (bad magic)"));
    }
    let mut buf4 = [0u8; 4];
    r.read_exact(&mut buf4)?;
    let nx = u32::from_le_bytes(buf4) as usize;
    r.read_exact(&mut buf4)?;
    let ny = u32::from_le_bytes(buf4) as usize;
    let mut field = vec![0.0; nx * ny];
    let mut buf8 = [0u8; 8];
    for v in field.iter_mut() {
        r.read_exact(&mut buf8)?;
        *v = f64::from_le_bytes(buf8);
    }
    Ok((nx, ny, field))
}
