//! Grids, finite-difference operators on the unit square, and the analytic
//! Dirichlet-Laplacian eigenpairs used as oracles.
//!
//! Degrees of freedom are the interior lattice points `(i, j)`, `0 <= i, j < n_side`,
//! at coordinates `((i+1)h, (j+1)h)`, numbered lexicographically with `i`
//! (the `x1` index) running fastest: `k = j * n_side + i`. Homogeneous
//! Dirichlet data is imposed on the whole boundary.

use std::f64::consts::PI;
use std::fmt::Write as _;

use nalgebra::DVector;
use nalgebra_sparse::{CooMatrix, CsrMatrix};

use crate::lowrank::LowRankMat;
use crate::{Error, Result};

/// Uniform interior lattice on the unit square.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid {
    n_side: usize,
    h: f64,
}

impl Grid {
    /// Spatial dimension; the domain is always the unit square.
    pub const DIM: i32 = 2;

    pub fn n_side(&self) -> usize {
        self.n_side
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn n_x(&self) -> usize {
        self.n_side * self.n_side
    }

    /// Lumped mass coefficient `h^d`.
    pub fn mass_scale(&self) -> f64 {
        self.h.powi(Self::DIM)
    }

    pub fn index(&self, i: usize, j: usize) -> usize {
        debug_assert!(i < self.n_side && j < self.n_side);
        j * self.n_side + i
    }

    pub fn lattice(&self, k: usize) -> (usize, usize) {
        (k % self.n_side, k / self.n_side)
    }

    pub fn point(&self, k: usize) -> (f64, f64) {
        let (i, j) = self.lattice(k);
        ((i + 1) as f64 * self.h, (j + 1) as f64 * self.h)
    }
}

pub fn build_grid(n_side: usize) -> Result<Grid> {
    if n_side < 2 {
        return Err(Error::InvalidConfig(format!(
            "n_side must be at least 2, got {n_side}"
        )));
    }
    Ok(Grid {
        n_side,
        h: 1.0 / (n_side + 1) as f64,
    })
}

/// Uniform time grid on `(0, t_final]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    n_t: usize,
    tau: f64,
    t_final: f64,
}

impl TimeGrid {
    pub fn new(n_t: usize, t_final: f64) -> Result<Self> {
        if n_t == 0 {
            return Err(Error::InvalidConfig("n_t must be positive".into()));
        }
        if !(t_final > 0.0 && t_final.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "final time must be positive, got {t_final}"
            )));
        }
        Ok(TimeGrid {
            n_t,
            tau: t_final / n_t as f64,
            t_final,
        })
    }

    /// `n_t` steps up to `T = 1`.
    pub fn unit(n_t: usize) -> Result<Self> {
        Self::new(n_t, 1.0)
    }

    pub fn n_t(&self) -> usize {
        self.n_t
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn t_final(&self) -> f64 {
        self.t_final
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OperatorKind {
    Heat,
    ConvDiff { nu: f64, wind: [f64; 2] },
}

/// A discretized elliptic operator `L` (finite-difference scaling, so the
/// heat diagonal is `4/h^2`) together with its lumped mass coefficient.
#[derive(Debug, Clone)]
pub struct SpatialOperator {
    kind: OperatorKind,
    grid: Grid,
    matrix: CsrMatrix<f64>,
}

impl SpatialOperator {
    pub fn kind(&self) -> OperatorKind {
        self.kind
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn matrix(&self) -> &CsrMatrix<f64> {
        &self.matrix
    }

    pub fn mass_scale(&self) -> f64 {
        self.grid.mass_scale()
    }

    pub fn is_symmetric(&self) -> bool {
        matches!(self.kind, OperatorKind::Heat)
            || matches!(self.kind, OperatorKind::ConvDiff { wind, .. } if wind == [0.0, 0.0])
    }

    pub fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        &self.matrix * v
    }

    /// Coordinate-format dump, one `row col value` triple per line.
    pub fn to_coo_text(&self) -> String {
        let mut out = String::new();
        for (i, j, v) in self.matrix.triplet_iter() {
            let _ = writeln!(out, "{i} {j} {v:.17e}");
        }
        out
    }
}

/// Five-point `-Δ` with zero Dirichlet data.
pub fn assemble_heat(grid: Grid) -> SpatialOperator {
    SpatialOperator {
        kind: OperatorKind::Heat,
        grid,
        matrix: assemble(grid, 1.0, [0.0, 0.0]),
    }
}

/// `-ν Δ + ω·∇` with the five-point Laplacian and first-order upwinding of
/// the convection term.
pub fn assemble_convdiff(grid: Grid, nu: f64, wind: [f64; 2]) -> Result<SpatialOperator> {
    if !(nu > 0.0 && nu.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "viscosity must be positive, got {nu}"
        )));
    }
    if !wind.iter().all(|w| w.is_finite()) {
        return Err(Error::InvalidConfig("wind must be finite".into()));
    }
    Ok(SpatialOperator {
        kind: OperatorKind::ConvDiff { nu, wind },
        grid,
        matrix: assemble(grid, nu, wind),
    })
}

fn assemble(grid: Grid, nu: f64, wind: [f64; 2]) -> CsrMatrix<f64> {
    let n = grid.n_side;
    let h = grid.h;
    let diff = nu / (h * h);
    let mut coo = CooMatrix::new(grid.n_x(), grid.n_x());
    for j in 0..n {
        for i in 0..n {
            let row = grid.index(i, j);
            // (di, dj, coefficient) for the west, east, south and north neighbours
            let mut diag = 4.0 * diff;
            let mut nbrs = [(-1i64, 0i64, -diff), (1, 0, -diff), (0, -1, -diff), (0, 1, -diff)];
            for (axis, &w) in wind.iter().enumerate() {
                if w == 0.0 {
                    continue;
                }
                let c = w.abs() / h;
                diag += c;
                // upstream neighbour along this axis
                let upstream = if w > 0.0 { 2 * axis } else { 2 * axis + 1 };
                nbrs[upstream].2 -= c;
            }
            coo.push(row, row, diag);
            for (di, dj, c) in nbrs {
                let (ii, jj) = (i as i64 + di, j as i64 + dj);
                if ii < 0 || jj < 0 || ii >= n as i64 || jj >= n as i64 {
                    continue;
                }
                coo.push(row, grid.index(ii as usize, jj as usize), c);
            }
        }
    }
    CsrMatrix::from(&coo)
}

/// Continuous Dirichlet-Laplacian eigenvalue `π²((m/a)² + (n/b)²)` on `[0,a]×[0,b]`.
pub fn analytic_poisson_eig(m: usize, n: usize, a: f64, b: f64) -> f64 {
    PI * PI * ((m as f64 / a).powi(2) + (n as f64 / b).powi(2))
}

/// Exact eigenvalue of the assembled five-point Laplacian for mode `(m, n)`.
pub fn discrete_fd_eig(m: usize, n: usize, grid: &Grid) -> Result<f64> {
    check_mode(m, n, grid)?;
    let h = grid.h;
    let s = |k: usize| (k as f64 * PI * h / 2.0).sin().powi(2);
    Ok(4.0 / (h * h) * (s(m) + s(n)))
}

/// The separable eigenvector `sin(mπx₁) ⊗ sin(nπx₂)` sampled on the grid, as a
/// rank-1 field over `x1 × x2`, normalized to unit Euclidean norm.
pub fn analytic_separable_eigvec(m: usize, n: usize, grid: &Grid) -> Result<LowRankMat> {
    check_mode(m, n, grid)?;
    let side = grid.n_side;
    let sample = |k: usize| {
        let v = DVector::from_fn(side, |i, _| ((i + 1) as f64 * k as f64 * PI * grid.h).sin());
        let nrm = v.norm();
        v / nrm
    };
    Ok(LowRankMat::outer(&sample(m), &sample(n)))
}

/// Flattens an `x1 × x2` field into the lexicographic dof vector.
pub fn spatial_vector(field: &LowRankMat) -> DVector<f64> {
    let dense = field.to_dense();
    DVector::from_column_slice(dense.as_slice())
}

/// Reshapes a dof vector into its `n_side × n_side` (`x1` rows, `x2` columns) layout.
pub fn spatial_matrix(v: &DVector<f64>, grid: &Grid) -> nalgebra::DMatrix<f64> {
    nalgebra::DMatrix::from_column_slice(grid.n_side, grid.n_side, v.as_slice())
}

fn check_mode(m: usize, n: usize, grid: &Grid) -> Result<()> {
    let range = 1..=grid.n_side;
    if !range.contains(&m) || !range.contains(&n) {
        return Err(Error::InvalidConfig(format!(
            "mode ({m}, {n}) outside 1..={}",
            grid.n_side
        )));
    }
    Ok(())
}
