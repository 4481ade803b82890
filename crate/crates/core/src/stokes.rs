//! Full-order steady Stokes solver on the voxelized pore domain.
//!
//! Quadrilateral Taylor-Hood pairing (biquadratic velocity, bilinear
//! pressure) on the fluid cells of a regular `n x n` mesh. No-slip is imposed
//! strongly on every node touching a solid cell, the wall velocity on the
//! top and bottom faces, and the tractions `-P0 n` / `-P_out n` enter as
//! natural boundary terms on the inlet and outlet faces.

use std::time::Instant;

use faer::prelude::*;
use faer::sparse::{SparseColMat, Triplet};
use faer::Mat;
use serde::{Deserialize, Serialize};

use crate::bc::BoundaryConditions;
use crate::error::{Error, Result};
use crate::field::{lattice_coord, FineField};
use crate::microstructure::{percolates, voxelize, Microstructure, SolidMask};

pub const RESIDUAL_TOLERANCE: f64 = 1e-10;
pub const MIN_MESH_RESOLUTION: usize = 8;
const MAX_REFINEMENT_STEPS: usize = 4;

// 3-point Gauss-Legendre rule on [0, 1].
const GAUSS_X: [f64; 3] = [
    0.5 - 0.387_298_334_620_741_7,
    0.5,
    0.5 + 0.387_298_334_620_741_7,
];
const GAUSS_W: [f64; 3] = [5.0 / 18.0, 8.0 / 18.0, 5.0 / 18.0];

fn quad_basis(t: f64) -> [f64; 3] {
    [
        2.0 * (t - 0.5) * (t - 1.0),
        -4.0 * t * (t - 1.0),
        2.0 * t * (t - 0.5),
    ]
}

fn quad_basis_deriv(t: f64) -> [f64; 3] {
    [4.0 * t - 3.0, 4.0 - 8.0 * t, 4.0 * t - 1.0]
}

fn lin_basis(t: f64) -> [f64; 2] {
    [1.0 - t, t]
}

/// Reference-element integrals on the unit square. Velocity node `l = 3 j + i`,
/// pressure vertex `m = 2 j + i`.
struct ElementMatrices {
    laplace: [[f64; 9]; 9],
    /// `int psi_m d(phi_l)/d(xi)`
    div_x: [[f64; 9]; 4],
    /// `int psi_m d(phi_l)/d(eta)`
    div_y: [[f64; 9]; 4],
}

impl ElementMatrices {
    fn new() -> Self {
        let mut laplace = [[0.0; 9]; 9];
        let mut div_x = [[0.0; 9]; 4];
        let mut div_y = [[0.0; 9]; 4];
        for (qx, wx) in GAUSS_X.iter().zip(GAUSS_W) {
            for (qy, wy) in GAUSS_X.iter().zip(GAUSS_W) {
                let w = wx * wy;
                let (lx, ly) = (quad_basis(*qx), quad_basis(*qy));
                let (dx, dy) = (quad_basis_deriv(*qx), quad_basis_deriv(*qy));
                let (px, py) = (lin_basis(*qx), lin_basis(*qy));
                let mut gx = [0.0; 9];
                let mut gy = [0.0; 9];
                for j in 0..3 {
                    for i in 0..3 {
                        gx[3 * j + i] = dx[i] * ly[j];
                        gy[3 * j + i] = lx[i] * dy[j];
                    }
                }
                for a in 0..9 {
                    for b in 0..9 {
                        laplace[a][b] += w * (gx[a] * gx[b] + gy[a] * gy[b]);
                    }
                }
                for j in 0..2 {
                    for i in 0..2 {
                        let psi = px[i] * py[j];
                        for l in 0..9 {
                            div_x[2 * j + i][l] += w * psi * gx[l];
                            div_y[2 * j + i][l] += w * psi * gy[l];
                        }
                    }
                }
            }
        }
        ElementMatrices {
            laplace,
            div_x,
            div_y,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum VelocityNode {
    Inactive,
    Fixed([f64; 2]),
    Free(usize),
}

/// Solver diagnostics for one solve.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SolveDiagnostics {
    pub mesh_resolution: usize,
    pub velocity_dofs: usize,
    pub pressure_dofs: usize,
    pub nonzeros: usize,
    pub relative_residual: f64,
    pub refinement_steps: usize,
    pub wall_time_s: f64,
}

/// Finite-element solution: nodal velocity on the `(2n+1)^2` node lattice and
/// vertex pressure on the `(n+1)^2` vertex lattice.
#[derive(Debug, Clone)]
pub struct StokesSolution {
    mesh: usize,
    mask: SolidMask,
    ux: Vec<f64>,
    uy: Vec<f64>,
    pressure: Vec<f64>,
    pressure_active: Vec<bool>,
    divergence_residual: Vec<f64>,
    pub diagnostics: SolveDiagnostics,
}

/// Sparse matrix accumulated from element contributions, merged to compressed
/// columns.
struct Assembly {
    dim: usize,
    entries: Vec<(usize, usize, f64)>,
}

impl Assembly {
    fn add(&mut self, row: usize, col: usize, val: f64) {
        if val != 0.0 {
            self.entries.push((row, col, val));
        }
    }

    fn merged(mut self) -> Vec<(usize, usize, f64)> {
        self.entries.sort_unstable_by_key(|&(r, c, _)| (c, r));
        let mut out: Vec<(usize, usize, f64)> = Vec::with_capacity(self.entries.len() / 3);
        for (r, c, v) in self.entries {
            match out.last_mut() {
                Some(last) if last.0 == r && last.1 == c => last.2 += v,
                _ => out.push((r, c, v)),
            }
        }
        out
    }
}

fn matvec(entries: &[(usize, usize, f64)], x: &[f64], y: &mut [f64]) {
    y.iter_mut().for_each(|v| *v = 0.0);
    for &(r, c, v) in entries {
        y[r] += v * x[c];
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Solves the mixed problem and returns the finite-element solution.
pub fn solve_stokes_fe(
    ms: &Microstructure,
    bc: &BoundaryConditions,
    mesh_resolution: usize,
) -> Result<StokesSolution> {
    bc.validate()?;
    if mesh_resolution < MIN_MESH_RESOLUTION {
        return Err(Error::InvalidConfig(format!(
            "mesh resolution {mesh_resolution} below {MIN_MESH_RESOLUTION}"
        )));
    }
    let start = Instant::now();
    let n = mesh_resolution;
    let raw = voxelize(ms, n);
    if !percolates(&raw) {
        return Err(Error::NonPercolating);
    }
    let mask = raw.without_isolated_pockets();
    let fluid = |cx: usize, cy: usize| !mask.is_solid(cx, cy);

    let nv = 2 * n + 1;
    let np = n + 1;
    let h = 1.0 / n as f64;

    // Classify velocity nodes.
    let cells_touching = |a: usize| -> std::ops::RangeInclusive<usize> {
        let lo = if a >= 2 { (a - 1) / 2 } else { 0 };
        let hi = (a / 2).min(n - 1);
        lo..=hi
    };
    let mut nodes = vec![VelocityNode::Inactive; nv * nv];
    let mut n_free = 0;
    for b in 0..nv {
        for a in 0..nv {
            let mut any_fluid = false;
            let mut any_solid = false;
            for cy in cells_touching(b) {
                for cx in cells_touching(a) {
                    if fluid(cx, cy) {
                        any_fluid = true;
                    } else {
                        any_solid = true;
                    }
                }
            }
            if !any_fluid {
                continue;
            }
            nodes[b * nv + a] = if any_solid {
                VelocityNode::Fixed([0.0, 0.0])
            } else if b == 0 || b == nv - 1 {
                VelocityNode::Fixed(bc.wall_velocity)
            } else {
                n_free += 1;
                VelocityNode::Free(n_free - 1)
            };
        }
    }

    let mut pressure_dof = vec![usize::MAX; np * np];
    let mut n_pressure = 0;
    for cy in 0..n {
        for cx in 0..n {
            if !fluid(cx, cy) {
                continue;
            }
            for (i, j) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                let k = (cy + j) * np + cx + i;
                if pressure_dof[k] == usize::MAX {
                    pressure_dof[k] = 0;
                }
            }
        }
    }
    for d in pressure_dof.iter_mut() {
        if *d == 0 {
            *d = 2 * n_free + n_pressure;
            n_pressure += 1;
        }
    }
    if n_free == 0 || n_pressure == 0 {
        return Err(Error::SingularSystem(
            "no free velocity or pressure unknowns".into(),
        ));
    }

    let dim = 2 * n_free + n_pressure;
    let em = ElementMatrices::new();
    let mut asm = Assembly {
        dim,
        entries: Vec::with_capacity(n * n * 320),
    };
    let mut rhs = vec![0.0; dim];
    let edge_weights = [h / 6.0, 4.0 * h / 6.0, h / 6.0];

    for cy in 0..n {
        for cx in 0..n {
            if !fluid(cx, cy) {
                continue;
            }
            let local: [VelocityNode; 9] = std::array::from_fn(|l| {
                let (i, j) = (l % 3, l / 3);
                nodes[(2 * cy + j) * nv + 2 * cx + i]
            });
            let pdofs: [usize; 4] = std::array::from_fn(|m| {
                let (i, j) = (m % 2, m / 2);
                pressure_dof[(cy + j) * np + cx + i]
            });

            for (l1, n1) in local.iter().enumerate() {
                let VelocityNode::Free(r) = *n1 else { continue };
                for (l2, n2) in local.iter().enumerate() {
                    let a = em.laplace[l1][l2];
                    match *n2 {
                        VelocityNode::Free(c) => {
                            asm.add(r, c, a);
                            asm.add(n_free + r, n_free + c, a);
                        }
                        VelocityNode::Fixed(ud) => {
                            rhs[r] -= a * ud[0];
                            rhs[n_free + r] -= a * ud[1];
                        }
                        VelocityNode::Inactive => {}
                    }
                }
            }
            for (m, &p) in pdofs.iter().enumerate() {
                for (l, node) in local.iter().enumerate() {
                    let bx = -h * em.div_x[m][l];
                    let by = -h * em.div_y[m][l];
                    match *node {
                        VelocityNode::Free(c) => {
                            asm.add(p, c, bx);
                            asm.add(c, p, bx);
                            asm.add(p, n_free + c, by);
                            asm.add(n_free + c, p, by);
                        }
                        VelocityNode::Fixed(ud) => {
                            rhs[p] -= bx * ud[0] + by * ud[1];
                        }
                        VelocityNode::Inactive => {}
                    }
                }
            }
            // Natural traction terms: t.w with t = -P n.
            if cx == 0 {
                for (j, w) in edge_weights.iter().enumerate() {
                    if let VelocityNode::Free(r) = local[3 * j] {
                        rhs[r] += bc.inlet_pressure * w;
                    }
                }
            }
            if cx == n - 1 {
                for (j, w) in edge_weights.iter().enumerate() {
                    if let VelocityNode::Free(r) = local[3 * j + 2] {
                        rhs[r] -= bc.outlet_pressure * w;
                    }
                }
            }
        }
    }

    let dim = asm.dim;
    let entries = asm.merged();
    let nonzeros = entries.len();
    let rhs_norm = norm(&rhs);
    let mut x = vec![0.0; dim];
    let mut residual = 0.0;
    let mut refinement_steps = 0;
    if rhs_norm > 0.0 {
        let triplets: Vec<Triplet<usize, usize, f64>> = entries
            .iter()
            .map(|&(r, c, v)| Triplet::new(r, c, v))
            .collect();
        let mat = SparseColMat::<usize, f64>::try_new_from_triplets(dim, dim, &triplets)
            .map_err(|e| Error::SingularSystem(format!("matrix construction: {e:?}")))?;
        let lu = mat
            .sp_lu()
            .map_err(|e| Error::SingularSystem(format!("sparse LU: {e:?}")))?;
        let mut r = rhs.clone();
        let mut ax = vec![0.0; dim];
        loop {
            let mut delta = Mat::<f64>::from_fn(dim, 1, |i, _| r[i]);
            lu.solve_in_place(delta.as_mut());
            for (i, xi) in x.iter_mut().enumerate() {
                *xi += delta[(i, 0)];
            }
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::SingularSystem(
                    "factorization produced non-finite values".into(),
                ));
            }
            matvec(&entries, &x, &mut ax);
            for i in 0..dim {
                r[i] = rhs[i] - ax[i];
            }
            residual = norm(&r) / rhs_norm;
            if residual <= RESIDUAL_TOLERANCE * 1e-2 || refinement_steps >= MAX_REFINEMENT_STEPS {
                break;
            }
            refinement_steps += 1;
        }
        if residual > RESIDUAL_TOLERANCE {
            return Err(Error::SolverDivergence {
                residual,
                tolerance: RESIDUAL_TOLERANCE,
            });
        }
    }

    let mut ux = vec![0.0; nv * nv];
    let mut uy = vec![0.0; nv * nv];
    for (k, node) in nodes.iter().enumerate() {
        match *node {
            VelocityNode::Free(i) => {
                ux[k] = x[i];
                uy[k] = x[n_free + i];
            }
            VelocityNode::Fixed(ud) => {
                ux[k] = ud[0];
                uy[k] = ud[1];
            }
            VelocityNode::Inactive => {}
        }
    }
    let mut pressure = vec![0.0; np * np];
    let mut pressure_active = vec![false; np * np];
    for (k, &d) in pressure_dof.iter().enumerate() {
        if d != usize::MAX {
            pressure[k] = x[d];
            pressure_active[k] = true;
        }
    }

    // Pressure rows of the residual: the discrete divergence B u tested with
    // every pressure basis function (including the lifted boundary values).
    let mut divergence_residual = vec![0.0; n_pressure];
    {
        let mut full = vec![0.0; dim];
        matvec(&entries, &x, &mut full);
        for (i, d) in divergence_residual.iter_mut().enumerate() {
            let row = 2 * n_free + i;
            *d = full[row] - rhs[row];
        }
    }

    let diagnostics = SolveDiagnostics {
        mesh_resolution: n,
        velocity_dofs: 2 * n_free,
        pressure_dofs: n_pressure,
        nonzeros,
        relative_residual: residual,
        refinement_steps,
        wall_time_s: start.elapsed().as_secs_f64(),
    };
    log::debug!("stokes solve: {diagnostics:?}");

    Ok(StokesSolution {
        mesh: n,
        mask,
        ux,
        uy,
        pressure,
        pressure_active,
        divergence_residual,
        diagnostics,
    })
}

/// Solves the fine-scale problem and samples it onto the `output_grid` lattice.
/// Fluid flags of the `grid x grid` lattice for the mask the solver uses at
/// `mesh_resolution` (isolated pockets filled), matching `FineField::fluid`.
pub fn lattice_fluid(ms: &Microstructure, mesh_resolution: usize, grid: usize) -> Vec<bool> {
    lattice_fluid_from_mask(&voxelize(ms, mesh_resolution).without_isolated_pockets(), grid)
}

/// Lattice points whose containing mask cell is fluid.
pub fn lattice_fluid_from_mask(mask: &SolidMask, grid: usize) -> Vec<bool> {
    let n = mask.resolution();
    let cell = |i: usize| ((lattice_coord(i, grid) * n as f64).floor() as usize).min(n - 1);
    let mut fluid = vec![true; grid * grid];
    for iy in 0..grid {
        for ix in 0..grid {
            fluid[iy * grid + ix] = !mask.is_solid(cell(ix), cell(iy));
        }
    }
    fluid
}

pub fn solve_stokes(
    ms: &Microstructure,
    bc: &BoundaryConditions,
    mesh_resolution: usize,
    output_grid: usize,
) -> Result<FineField> {
    Ok(solve_stokes_fe(ms, bc, mesh_resolution)?.sample(output_grid))
}

impl StokesSolution {
    pub fn mesh_resolution(&self) -> usize {
        self.mesh
    }

    /// Fluid mask used by the discretization (isolated pockets filled).
    pub fn mask(&self) -> &SolidMask {
        &self.mask
    }

    fn locate(&self, t: f64) -> (usize, f64) {
        let s = t * self.mesh as f64;
        let c = (s.floor().max(0.0) as usize).min(self.mesh - 1);
        (c, s - c as f64)
    }

    /// Evaluates `(p, vx, vy)` at a point, or `None` inside a solid cell.
    pub fn evaluate(&self, x: f64, y: f64) -> Option<[f64; 3]> {
        let (cx, xi) = self.locate(x);
        let (cy, eta) = self.locate(y);
        if self.mask.is_solid(cx, cy) {
            return None;
        }
        let nv = 2 * self.mesh + 1;
        let np = self.mesh + 1;
        let (lx, ly) = (quad_basis(xi), quad_basis(eta));
        let (mut vx, mut vy) = (0.0, 0.0);
        for j in 0..3 {
            for i in 0..3 {
                let k = (2 * cy + j) * nv + 2 * cx + i;
                let w = lx[i] * ly[j];
                vx += w * self.ux[k];
                vy += w * self.uy[k];
            }
        }
        let (px, py) = (lin_basis(xi), lin_basis(eta));
        let mut p = 0.0;
        for j in 0..2 {
            for i in 0..2 {
                p += px[i] * py[j] * self.pressure[(cy + j) * np + cx + i];
            }
        }
        Some([p, vx, vy])
    }

    /// Samples onto the `grid x grid` cell-center lattice; solid points are zero.
    pub fn sample(&self, grid: usize) -> FineField {
        let mut field = FineField::zeros(grid);
        for iy in 0..grid {
            let y = lattice_coord(iy, grid);
            for ix in 0..grid {
                let k = iy * grid + ix;
                match self.evaluate(lattice_coord(ix, grid), y) {
                    Some([p, vx, vy]) => {
                        field.pressure[k] = p;
                        field.velocity_x[k] = vx;
                        field.velocity_y[k] = vy;
                    }
                    None => field.fluid[k] = false,
                }
            }
        }
        field
    }

    /// Exact flux `int v_x dy` through the mesh line `x = k / n`.
    pub fn line_flux(&self, k: usize) -> f64 {
        assert!(k <= self.mesh);
        let nv = 2 * self.mesh + 1;
        let a = 2 * k;
        let h = 1.0 / self.mesh as f64;
        (0..self.mesh)
            .map(|cy| {
                let v = |b: usize| self.ux[b * nv + a];
                h / 6.0 * (v(2 * cy) + 4.0 * v(2 * cy + 1) + v(2 * cy + 2))
            })
            .sum()
    }

    /// Mean of the line flux over the mesh column `k` (`k/n <= x <= (k+1)/n`).
    ///
    /// This is the flux tested with a piecewise-linear ramp in `x`, which lies
    /// in the pressure space, so it equals the inlet flux up to the solver
    /// residual for every column.
    pub fn strip_flux(&self, k: usize) -> f64 {
        assert!(k < self.mesh);
        let nv = 2 * self.mesh + 1;
        let h = 1.0 / self.mesh as f64;
        let mut total = 0.0;
        for cy in 0..self.mesh {
            if self.mask.is_solid(k, cy) {
                continue;
            }
            for (qx, wx) in GAUSS_X.iter().zip(GAUSS_W) {
                for (qy, wy) in GAUSS_X.iter().zip(GAUSS_W) {
                    let (lx, ly) = (quad_basis(*qx), quad_basis(*qy));
                    let mut v = 0.0;
                    for j in 0..3 {
                        for i in 0..3 {
                            v += lx[i] * ly[j] * self.ux[(2 * cy + j) * nv + 2 * k + i];
                        }
                    }
                    // (1/h) * int v dx dy over the cell = h * sum w v
                    total += wx * wy * v * h;
                }
            }
        }
        total
    }

    /// Largest magnitude of the discrete divergence tested against the
    /// pressure basis.
    pub fn max_divergence_residual(&self) -> f64 {
        self.divergence_residual
            .iter()
            .fold(0.0, |m, v| m.max(v.abs()))
    }

    /// `int_K div v` for every fluid cell, in mask order (solid cells give 0).
    pub fn element_divergence(&self) -> Vec<f64> {
        let n = self.mesh;
        let nv = 2 * n + 1;
        let h = 1.0 / n as f64;
        // int_K d(phi_l)/dx = h * int_ref d(phi)/d(xi) since dx = h^2 d(xi).
        let mut gx = [0.0; 9];
        let mut gy = [0.0; 9];
        for (qx, wx) in GAUSS_X.iter().zip(GAUSS_W) {
            for (qy, wy) in GAUSS_X.iter().zip(GAUSS_W) {
                let (lx, ly) = (quad_basis(*qx), quad_basis(*qy));
                let (dx, dy) = (quad_basis_deriv(*qx), quad_basis_deriv(*qy));
                for j in 0..3 {
                    for i in 0..3 {
                        gx[3 * j + i] += wx * wy * dx[i] * ly[j];
                        gy[3 * j + i] += wx * wy * lx[i] * dy[j];
                    }
                }
            }
        }
        let mut out = vec![0.0; n * n];
        for cy in 0..n {
            for cx in 0..n {
                if self.mask.is_solid(cx, cy) {
                    continue;
                }
                let mut d = 0.0;
                for l in 0..9 {
                    let k = (2 * cy + l / 3) * nv + 2 * cx + l % 3;
                    d += h * (gx[l] * self.ux[k] + gy[l] * self.uy[k]);
                }
                out[cy * n + cx] = d;
            }
        }
        out
    }

    /// Velocity values at nodes on solid-fluid interfaces.
    pub fn interface_velocity_max(&self) -> f64 {
        let n = self.mesh;
        let nv = 2 * n + 1;
        let mut worst: f64 = 0.0;
        for b in 0..nv {
            for a in 0..nv {
                let touches_solid = {
                    let cells = |t: usize| {
                        let lo = if t >= 2 { (t - 1) / 2 } else { 0 };
                        lo..=(t / 2).min(n - 1)
                    };
                    cells(b).any(|cy| cells(a).any(|cx| self.mask.is_solid(cx, cy)))
                };
                if touches_solid {
                    let k = b * nv + a;
                    worst = worst.max(self.ux[k].abs()).max(self.uy[k].abs());
                }
            }
        }
        worst
    }

    /// Root-mean-square nodal speed, used to scale divergence checks.
    pub fn mean_speed(&self) -> f64 {
        let (mut s, mut c) = (0.0, 0usize);
        for (x, y) in self.ux.iter().zip(&self.uy) {
            if *x != 0.0 || *y != 0.0 {
                s += x.hypot(*y);
                c += 1;
            }
        }
        if c == 0 {
            0.0
        } else {
            s / c as f64
        }
    }

    pub fn pressure_range(&self) -> (f64, f64) {
        self.pressure
            .iter()
            .zip(&self.pressure_active)
            .filter(|(_, &a)| a)
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (p, _)| {
                (lo.min(*p), hi.max(*p))
            })
    }
}

/// Trapezoidal `int_0^1 v_x dy` along the lattice column nearest `x_station`.
///
/// The no-slip walls contribute zero end values at `y = 0` and `y = 1`.
pub fn mass_flux(field: &FineField, x_station: f64) -> f64 {
    let g = field.grid_size;
    let ix = ((x_station * g as f64 - 0.5).round().max(0.0) as usize).min(g - 1);
    let h = 1.0 / g as f64;
    let column: Vec<f64> = (0..g).map(|iy| field.velocity_x[iy * g + ix]).collect();
    let mut total = 0.5 * h * column[0] + 0.5 * h * column[g - 1];
    for w in column.windows(2) {
        total += 0.5 * h * (w[0] + w[1]);
    }
    total
}
