//! Observation, covariance and the matrix-free prior-preconditioned misfit
//! Hessian `H̃ = Γ_prior^{1/2} Nᵀ K⁻ᵀ Bᵀ Γ_noise⁻¹ B K⁻¹ N Γ_prior^{1/2}`.
//!
//! The noise precision is the quadrature weight `β_noise · τ · M` restricted
//! to the sensor mask, observation is active at every time step, and the
//! prior is `γ·I`.

use nalgebra::DVector;

use crate::arnoldi::Applied;
use crate::banded::BandedLu;
use crate::discretize::{assemble_convdiff, assemble_heat, Grid, OperatorKind, SpatialOperator, TimeGrid};
use crate::forward::{InitInjection, SolverBackend, SpaceTimeOperator};
use crate::lowrank::{LowRankMat, TruncationPolicy};
use crate::{Error, Result};

/// Smallest grid on which the nine-patch layout is resolved.
pub const MIN_SIDE_3X3: usize = 15;

/// Axis-aligned square sensor footprint.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Patch {
    pub center: [f64; 2],
    pub side: f64,
}

impl Patch {
    fn bounds(&self, axis: usize) -> (f64, f64) {
        let half = 0.5 * self.side;
        (self.center[axis] - half, self.center[axis] + half)
    }

    /// Euclidean distance from `p` to the patch (zero inside).
    pub fn distance(&self, p: (f64, f64)) -> f64 {
        let gap = |axis: usize, x: f64| {
            let (a, b) = self.bounds(axis);
            (a - x).max(x - b).max(0.0)
        };
        gap(0, p.0).hypot(gap(1, p.1))
    }

    /// Lattice indices `m` (coordinate `m·h`) covered along one axis.
    fn cover(&self, axis: usize, grid: &Grid) -> std::ops::Range<usize> {
        let (a, b) = self.bounds(axis);
        let h = grid.h();
        let lo = ((a / h + 1e-9).floor().max(1.0)) as usize;
        let hi = ((b / h - 1e-9).ceil().min(grid.n_side() as f64 + 1.0)) as usize;
        lo..hi.max(lo)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayoutKind {
    Full,
    Empty,
    Patches,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensorLayout {
    kind: LayoutKind,
    patches: Vec<Patch>,
    mask: Vec<bool>,
}

impl SensorLayout {
    /// Every dof observed.
    pub fn full(grid: &Grid) -> Self {
        SensorLayout {
            kind: LayoutKind::Full,
            patches: Vec::new(),
            mask: vec![true; grid.n_x()],
        }
    }

    pub fn empty(grid: &Grid) -> Self {
        SensorLayout {
            kind: LayoutKind::Empty,
            patches: Vec::new(),
            mask: vec![false; grid.n_x()],
        }
    }

    pub fn from_patches(grid: &Grid, patches: Vec<Patch>) -> Result<Self> {
        if patches.is_empty() {
            return Ok(Self::empty(grid));
        }
        let mut mask = vec![false; grid.n_x()];
        for p in &patches {
            let inside = (0..2).all(|ax| {
                let (a, b) = p.bounds(ax);
                a >= 0.0 && b <= 1.0
            });
            if !(p.side > 0.0) || !inside {
                return Err(Error::InvalidConfig(format!(
                    "sensor patch {:?} with side {} leaves the unit square",
                    p.center, p.side
                )));
            }
            let (xs, ys) = (p.cover(0, grid), p.cover(1, grid));
            if xs.is_empty() || ys.is_empty() {
                return Err(Error::InvalidConfig(format!(
                    "sensor patch at {:?} covers no grid point",
                    p.center
                )));
            }
            for mj in ys {
                for mi in xs.clone() {
                    mask[grid.index(mi - 1, mj - 1)] = true;
                }
            }
        }
        Ok(SensorLayout {
            kind: LayoutKind::Patches,
            patches,
            mask,
        })
    }

    /// Nine patches of side 1/16 centred at `(i/4, j/4)`, `i, j ∈ {1, 2, 3}`.
    pub fn grid3x3(grid: &Grid) -> Result<Self> {
        if grid.n_side() < MIN_SIDE_3X3 {
            return Err(Error::InvalidConfig(format!(
                "3x3 sensor layout needs n_side >= {MIN_SIDE_3X3}, got {}",
                grid.n_side()
            )));
        }
        let patches = (1..=3)
            .flat_map(|j| (1..=3).map(move |i| (i, j)))
            .map(|(i, j)| Patch {
                center: [i as f64 / 4.0, j as f64 / 4.0],
                side: 1.0 / 16.0,
            })
            .collect();
        Self::from_patches(grid, patches)
    }

    pub fn kind(&self) -> LayoutKind {
        self.kind
    }

    pub fn is_full(&self) -> bool {
        self.kind == LayoutKind::Full
    }

    pub fn patches(&self) -> &[Patch] {
        &self.patches
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn observed(&self) -> Vec<usize> {
        (0..self.mask.len()).filter(|&k| self.mask[k]).collect()
    }

    /// Distance from `p` to the nearest sensor; zero everywhere under full
    /// observation and infinite without sensors.
    pub fn distance(&self, p: (f64, f64)) -> f64 {
        match self.kind {
            LayoutKind::Full => 0.0,
            LayoutKind::Empty => f64::INFINITY,
            LayoutKind::Patches => self
                .patches
                .iter()
                .map(|s| s.distance(p))
                .fold(f64::INFINITY, f64::min),
        }
    }
}

pub fn make_sensor_layout_3x3(grid: &Grid) -> Result<SensorLayout> {
    SensorLayout::grid3x3(grid)
}

/// Scalar noise and prior parameters, `Γ_prior = γ·I`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CovarianceSpec {
    pub beta_noise: f64,
    pub beta_prior: f64,
    pub gamma_prior: f64,
}

/// How the prior variance is chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PriorPreset {
    /// `γ` given directly; `β_prior = 1/(γ h^d)`.
    Scalar(f64),
    /// `β_prior` given; `γ = 1/(β_prior h^d)`.
    Beta(f64),
}

impl CovarianceSpec {
    pub fn new(beta_noise: f64, beta_prior: f64, gamma_prior: f64) -> Result<Self> {
        for (name, v) in [
            ("beta_noise", beta_noise),
            ("beta_prior", beta_prior),
            ("gamma_prior", gamma_prior),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(CovarianceSpec {
            beta_noise,
            beta_prior,
            gamma_prior,
        })
    }

    /// Builds the covariances from a prior preset and `β_noise = ratio · β_prior`.
    pub fn from_preset(preset: PriorPreset, ratio: f64, grid: &Grid) -> Result<Self> {
        let md = grid.mass_scale();
        let (beta_prior, gamma) = match preset {
            PriorPreset::Scalar(g) => (1.0 / (g * md), g),
            PriorPreset::Beta(b) => (b, 1.0 / (b * md)),
        };
        if !(ratio > 0.0 && ratio.is_finite()) {
            return Err(Error::InvalidConfig(format!("beta ratio must be positive, got {ratio}")));
        }
        Self::new(ratio * beta_prior, beta_prior, gamma)
    }

    pub fn ratio(&self) -> f64 {
        self.beta_noise / self.beta_prior
    }

    pub fn prior_root(&self) -> f64 {
        self.gamma_prior.sqrt()
    }

    /// Uniform noise-precision weight `β_noise · τ · M`.
    pub fn noise_weight(&self, tau: f64, mass_scale: f64) -> f64 {
        self.beta_noise * tau * mass_scale
    }
}

/// `β_noise · τ · M · (mask ∘ Y)`, recompressed.
pub fn apply_obs_weight(
    y: &LowRankMat,
    layout: &SensorLayout,
    cov: &CovarianceSpec,
    time: &TimeGrid,
    mass_scale: f64,
    pol: &TruncationPolicy,
) -> Result<LowRankMat> {
    let w = cov.noise_weight(time.tau(), mass_scale);
    let masked = match layout.kind() {
        LayoutKind::Full => y.clone(),
        LayoutKind::Empty => return Ok(LowRankMat::zeros(y.rows(), y.cols())),
        LayoutKind::Patches => y.mask_rows(layout.mask())?,
    };
    Ok(masked.scale(w).truncate(pol))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParameterMode {
    /// Unknown initial state; parameter space is `R^{n_x}`.
    InitialCondition,
    /// Unknown space-time source; parameter space is `R^{n_x × n_t}`.
    DistributedSource,
    /// Steady Poisson problem with the inverse Laplacian as forward map.
    SteadyPoisson,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProblemSpec {
    pub grid: Grid,
    pub time: TimeGrid,
    pub operator: OperatorKind,
    pub sensors: SensorLayout,
    pub cov: CovarianceSpec,
    pub mode: ParameterMode,
}

impl ProblemSpec {
    pub fn spatial_operator(&self) -> Result<SpatialOperator> {
        match self.operator {
            OperatorKind::Heat => Ok(assemble_heat(self.grid)),
            OperatorKind::ConvDiff { nu, wind } => assemble_convdiff(self.grid, nu, wind),
        }
    }

    /// Dimension of the parameter space.
    pub fn parameter_dim(&self) -> usize {
        match self.mode {
            ParameterMode::DistributedSource => self.grid.n_x() * self.time.n_t(),
            _ => self.grid.n_x(),
        }
    }
}

/// `(β_prior/β_noise) · L⁻²` with the heat Laplacian.
#[derive(Debug, Clone)]
pub struct SteadyPoissonHessian {
    lu: BandedLu,
    factor: f64,
}

impl SteadyPoissonHessian {
    pub fn new(cov: &CovarianceSpec, op: &SpatialOperator) -> Result<Self> {
        if !matches!(op.kind(), OperatorKind::Heat) {
            return Err(Error::InvalidConfig(
                "the steady Poisson mode needs the heat operator".into(),
            ));
        }
        Ok(SteadyPoissonHessian {
            lu: BandedLu::factor(op.matrix())?,
            factor: 1.0 / cov.ratio(),
        })
    }

    pub fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        let mut x = v.clone();
        self.lu.solve_in_place(x.as_mut_slice());
        self.lu.solve_in_place(x.as_mut_slice());
        x * self.factor
    }
}

#[derive(Debug, Clone)]
enum Kernel {
    Transient {
        op: SpaceTimeOperator,
        inj: InitInjection,
    },
    Steady(SteadyPoissonHessian),
}

/// Everything needed to apply `H̃`, plus a record of the intermediate ranks.
#[derive(Debug, Clone)]
pub struct HessianContext {
    spec: ProblemSpec,
    kernel: Kernel,
    pol: TruncationPolicy,
    backend: SolverBackend,
    rank_trace: Vec<usize>,
}

impl HessianContext {
    pub fn new(spec: ProblemSpec, pol: TruncationPolicy) -> Result<Self> {
        let spatial = spec.spatial_operator()?;
        let kernel = match spec.mode {
            ParameterMode::SteadyPoisson => Kernel::Steady(SteadyPoissonHessian::new(&spec.cov, &spatial)?),
            _ => {
                let op = SpaceTimeOperator::new(spatial, spec.time)?;
                let inj = InitInjection::new(&op);
                Kernel::Transient { op, inj }
            }
        };
        Ok(HessianContext {
            spec,
            kernel,
            pol,
            backend: SolverBackend::Sweep,
            rank_trace: Vec::new(),
        })
    }

    pub fn with_backend(mut self, backend: SolverBackend) -> Self {
        self.backend = backend;
        self
    }

    pub fn with_compress_every(mut self, p: usize) -> Result<Self> {
        if let Kernel::Transient { op, .. } = &mut self.kernel {
            *op = op.clone().with_compress_every(p)?;
        }
        Ok(self)
    }

    pub fn spec(&self) -> &ProblemSpec {
        &self.spec
    }

    pub fn policy(&self) -> &TruncationPolicy {
        &self.pol
    }

    pub fn operator(&self) -> Option<&SpaceTimeOperator> {
        match &self.kernel {
            Kernel::Transient { op, .. } => Some(op),
            Kernel::Steady(_) => None,
        }
    }

    /// Max intermediate rank of every application so far.
    pub fn rank_trace(&self) -> &[usize] {
        &self.rank_trace
    }

    fn solve(&self, op: &SpaceTimeOperator, rhs: &LowRankMat, adjoint: bool) -> Result<(LowRankMat, usize)> {
        match self.backend {
            SolverBackend::Sweep => {
                let out = if adjoint {
                    op.solve_adjoint_sweep(rhs, &self.pol)?
                } else {
                    op.solve_sweep(rhs, &self.pol)?
                };
                Ok((out.field, out.max_rank))
            }
            SolverBackend::Krylov(opts) => {
                let out = if adjoint {
                    op.solve_krylov_transpose(rhs, &self.pol, &opts)?
                } else {
                    op.solve_krylov(rhs, &self.pol, &opts)?
                }
                .into_result()?;
                let r = out.max_rank();
                Ok((out.field, r))
            }
        }
    }

    /// `B K⁻¹` followed by the weighted `K⁻ᵀ Bᵀ`, shared by both transient modes.
    fn misfit_state(&self, op: &SpaceTimeOperator, rhs: &LowRankMat) -> Result<(LowRankMat, usize)> {
        let (state, r1) = self.solve(op, rhs, false)?;
        let weighted = apply_obs_weight(
            &state,
            &self.spec.sensors,
            &self.spec.cov,
            &self.spec.time,
            op.mass_scale(),
            &self.pol,
        )?;
        let (adjoint, r2) = self.solve(op, &weighted, true)?;
        Ok((adjoint, r1.max(r2)))
    }

    /// `H̃ v` for a spatial parameter (initial-condition or steady mode).
    pub fn apply_spatial(&mut self, v: &DVector<f64>) -> Result<Applied<DVector<f64>>> {
        if v.len() != self.spec.grid.n_x() {
            return Err(Error::mismatch((self.spec.grid.n_x(), 1), (v.len(), 1)));
        }
        let out = match (&self.kernel, self.spec.mode) {
            (Kernel::Steady(s), _) => Applied {
                value: s.apply(v),
                max_rank: 0,
            },
            (Kernel::Transient { op, inj }, ParameterMode::InitialCondition) => {
                let root = self.spec.cov.prior_root();
                let (adj, max_rank) = self.misfit_state(op, &inj.inject(&(v * root)))?;
                Applied {
                    value: inj.extract(&adj) * root,
                    max_rank,
                }
            }
            _ => {
                return Err(Error::InvalidConfig(
                    "spatial application needs a spatial parameter mode".into(),
                ))
            }
        };
        self.rank_trace.push(out.max_rank);
        Ok(out)
    }

    /// `H̃ v` for a space-time source; the injection is `τ M` blockwise.
    pub fn apply_space_time(&mut self, v: &LowRankMat) -> Result<Applied<LowRankMat>> {
        let Kernel::Transient { op, .. } = &self.kernel else {
            return Err(Error::InvalidConfig("space-time application needs a transient problem".into()));
        };
        if self.spec.mode != ParameterMode::DistributedSource {
            return Err(Error::InvalidConfig(
                "space-time application needs the distributed-source mode".into(),
            ));
        }
        let scale = self.spec.cov.prior_root() * op.time().tau() * op.mass_scale();
        let (adj, max_rank) = self.misfit_state(op, &v.scale(scale))?;
        let value = adj.scale(scale).truncate(&self.pol);
        let max_rank = max_rank.max(value.rank());
        self.rank_trace.push(max_rank);
        Ok(Applied { value, max_rank })
    }
}

/// Spatial-mode `H̃ v` as a free function.
pub fn misfit_apply_ic(v: &DVector<f64>, ctx: &mut HessianContext) -> Result<DVector<f64>> {
    Ok(ctx.apply_spatial(v)?.value)
}

/// Space-time-mode `H̃ v` as a free function.
pub fn misfit_apply_st(v: &LowRankMat, ctx: &mut HessianContext) -> Result<LowRankMat> {
    Ok(ctx.apply_space_time(v)?.value)
}

pub fn steady_poisson_apply(v: &DVector<f64>, cov: &CovarianceSpec, op: &SpatialOperator) -> Result<DVector<f64>> {
    Ok(SteadyPoissonHessian::new(cov, op)?.apply(v))
}
