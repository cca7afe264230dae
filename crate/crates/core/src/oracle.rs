//! Dense reference computations at small scale.
//!
//! Everything here is built from the sparse operators of [`crate::discretize`]
//! and dense factorizations only: the all-at-once matrix is assembled
//! explicitly and the Hessian is formed column by column, so agreement with the
//! low-rank path is evidence rather than tautology.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::arnoldi::ArnoldiResult;
use crate::discretize::SpatialOperator;
use crate::hessian::{HessianContext, LayoutKind, ParameterMode, ProblemSpec};
use crate::posterior::PosteriorSummary;
use crate::{Error, Result};

pub const DEFAULT_CAP: usize = 2000;

fn dense_of(op: &SpatialOperator) -> DMatrix<f64> {
    let n = op.grid().n_x();
    let mut d = DMatrix::zeros(n, n);
    for (i, j, v) in op.matrix().triplet_iter() {
        d[(i, j)] += *v;
    }
    d
}

/// Explicit all-at-once matrix: diagonal blocks `M(I + τL)`, subdiagonal `−M I`.
pub fn dense_space_time(spec: &ProblemSpec) -> Result<DMatrix<f64>> {
    let op = spec.spatial_operator()?;
    let l = dense_of(&op);
    let (n, nt) = (spec.grid.n_x(), spec.time.n_t());
    let m = spec.grid.mass_scale();
    let tau = spec.time.tau();
    let block = (DMatrix::identity(n, n) + l * tau) * m;
    let mut k = DMatrix::zeros(n * nt, n * nt);
    for b in 0..nt {
        k.view_mut((b * n, b * n), (n, n)).copy_from(&block);
        if b > 0 {
            for i in 0..n {
                k[(b * n + i, (b - 1) * n + i)] = -m;
            }
        }
    }
    Ok(k)
}

#[derive(Debug, Clone)]
pub struct DenseMisfit {
    /// Prior-preconditioned Hessian, symmetrized.
    pub h_tilde: DMatrix<f64>,
    /// Misfit Hessian without the prior scaling, symmetrized.
    pub unpreconditioned: DMatrix<f64>,
    /// `max|H − Hᵀ| / max|H|` before symmetrization.
    pub asymmetry: f64,
    pub gamma_prior: f64,
}

/// Explicit `H̃`; refuses when the dense dimension exceeds `cap`.
pub fn dense_misfit(spec: &ProblemSpec, cap: usize) -> Result<DenseMisfit> {
    let gamma = spec.cov.gamma_prior;
    let raw = match spec.mode {
        ParameterMode::SteadyPoisson => {
            let n = spec.grid.n_x();
            if n > cap {
                return Err(Error::OracleCap { dim: n, cap });
            }
            let l = dense_of(&spec.spatial_operator()?);
            let inv = l
                .lu()
                .try_inverse()
                .ok_or_else(|| Error::Factorization("singular Laplacian".into()))?;
            // the steady misfit is stated directly in preconditioned form
            (&inv * &inv) * (1.0 / (spec.cov.ratio() * gamma))
        }
        ParameterMode::InitialCondition | ParameterMode::DistributedSource => {
            let (n, nt) = (spec.grid.n_x(), spec.time.n_t());
            let dim = n * nt;
            if dim > cap {
                return Err(Error::OracleCap { dim, cap });
            }
            let k = dense_space_time(spec)?;
            let m = spec.grid.mass_scale();
            let tau = spec.time.tau();
            let injection = if spec.mode == ParameterMode::InitialCondition {
                let mut c = DMatrix::zeros(dim, n);
                for i in 0..n {
                    c[(i, i)] = m;
                }
                c
            } else {
                DMatrix::identity(dim, dim) * (tau * m)
            };
            let weight = spec.cov.beta_noise * tau * m;
            let observed: Vec<bool> = match spec.sensors.kind() {
                LayoutKind::Full => vec![true; n],
                _ => spec.sensors.mask().to_vec(),
            };
            let state = k
                .clone()
                .lu()
                .solve(&injection)
                .ok_or_else(|| Error::Factorization("singular space-time matrix".into()))?;
            let mut weighted = state;
            for r in 0..dim {
                let w = if observed[r % n] { weight } else { 0.0 };
                weighted.row_mut(r).scale_mut(w);
            }
            let adjoint = k
                .transpose()
                .lu()
                .solve(&weighted)
                .ok_or_else(|| Error::Factorization("singular space-time matrix".into()))?;
            injection.transpose() * adjoint
        }
    };
    let scale = raw.amax();
    let asymmetry = if scale > 0.0 {
        (&raw - raw.transpose()).amax() / scale
    } else {
        0.0
    };
    let unpreconditioned = (&raw + raw.transpose()) * 0.5;
    Ok(DenseMisfit {
        h_tilde: &unpreconditioned * gamma,
        unpreconditioned,
        asymmetry,
        gamma_prior: gamma,
    })
}

/// Leading `k` eigenpairs of a symmetric matrix, descending, with a residual check.
pub fn dense_eig_top(hd: &DMatrix<f64>, k: usize) -> Result<Vec<(f64, DVector<f64>)>> {
    let eig = SymmetricEigen::try_new(hd.clone(), 1e-30, 100_000)
        .or_else(|| SymmetricEigen::try_new(hd.clone(), f64::EPSILON, 100_000))
        .ok_or_else(|| Error::Eigen("dense symmetric eigensolver did not converge".into()))?;
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let norm = hd.amax().max(f64::MIN_POSITIVE) * hd.nrows() as f64;
    let mut out = Vec::with_capacity(k);
    for &i in order.iter().take(k) {
        let lam = eig.eigenvalues[i];
        let v = eig.eigenvectors.column(i).into_owned();
        let res = (hd * &v - &v * lam).norm();
        if res > 1e-10 * norm {
            return Err(Error::Eigen(format!("dense eigenpair residual {res:.3e}")));
        }
        out.push((lam, v));
    }
    Ok(out)
}

/// `(H + γ⁻¹ I)⁻¹` for the unpreconditioned misfit Hessian.
pub fn dense_posterior(misfit: &DenseMisfit) -> Result<DMatrix<f64>> {
    let n = misfit.unpreconditioned.nrows();
    let a = &misfit.unpreconditioned + DMatrix::identity(n, n) / misfit.gamma_prior;
    let chol = a
        .cholesky()
        .ok_or_else(|| Error::Factorization("regularized Hessian is not positive definite".into()))?;
    Ok(chol.inverse())
}

pub fn dense_posterior_diag(misfit: &DenseMisfit) -> Result<DVector<f64>> {
    Ok(dense_posterior(misfit)?.diagonal())
}

/// Largest principal angle (radians) between `span(a)` and `span(b)`;
/// `π/2` when `a` has more columns than `b` can contain.
pub fn max_principal_angle(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    if a.ncols() == 0 {
        return 0.0;
    }
    if a.ncols() > b.ncols() {
        return std::f64::consts::FRAC_PI_2;
    }
    let qa = a.clone().qr().q();
    let qb = b.clone().qr().q();
    let resid = &qa - &qb * (qb.transpose() * &qa);
    let s = crate::lowrank::accurate_svd(resid).singular_values.max();
    s.min(1.0).asin()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerances {
    pub eig_rel: f64,
    pub angle: f64,
    pub variance_rel: f64,
    pub matvec_rel: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            eig_rel: 1e-6,
            angle: 1e-4,
            variance_rel: 1e-4,
            matvec_rel: 1e-8,
        }
    }
}

/// Dense side of a comparison.
#[derive(Debug, Clone)]
pub struct DenseReference {
    /// All eigenpairs needed, descending.
    pub eigenpairs: Vec<(f64, DVector<f64>)>,
    pub posterior_diag: Option<DVector<f64>>,
}

impl DenseReference {
    /// Top `k` eigenpairs plus any beyond `k` that tie with the `k`-th, and
    /// the posterior diagonal.
    pub fn build(misfit: &DenseMisfit, k: usize) -> Result<Self> {
        let n = misfit.h_tilde.nrows();
        let all = dense_eig_top(&misfit.h_tilde, n)?;
        let scale = all.first().map(|p| p.0.abs()).unwrap_or(0.0);
        let mut keep = k.min(n);
        while keep < n && keep > 0 && (all[keep].0 - all[keep - 1].0).abs() <= CLUSTER_REL * scale {
            keep += 1;
        }
        Ok(DenseReference {
            eigenpairs: all.into_iter().take(keep).collect(),
            posterior_diag: Some(dense_posterior_diag(misfit)?),
        })
    }
}

/// Relative gap below which eigenvalues are compared as one cluster.
pub const CLUSTER_REL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct OracleReport {
    pub k: usize,
    pub eig_rel_errors: Vec<f64>,
    /// One entry per leading eigenvalue: the angle of its cluster's subspace.
    pub eigvec_angles: Vec<f64>,
    pub variance_rel_error: Option<f64>,
    pub matvec_rel_error: Option<f64>,
    pub dense_asymmetry: Option<f64>,
    pub tol: Tolerances,
}

impl OracleReport {
    pub fn max_eig_error(&self) -> f64 {
        self.eig_rel_errors.iter().copied().fold(0.0, f64::max)
    }

    pub fn max_angle(&self) -> f64 {
        self.eigvec_angles.iter().copied().fold(0.0, f64::max)
    }

    pub fn pass(&self) -> bool {
        self.max_eig_error() <= self.tol.eig_rel
            && self.max_angle() <= self.tol.angle
            && self.variance_rel_error.is_none_or(|e| e <= self.tol.variance_rel)
            && self.matvec_rel_error.is_none_or(|e| e <= self.tol.matvec_rel)
            && self.dense_asymmetry.is_none_or(|e| e <= 1e-10)
    }

    /// `key=value` lines.
    pub fn to_key_value(&self) -> String {
        let mut s = String::new();
        let list = |v: &[f64]| v.iter().map(|x| format!("{x:.6e}")).collect::<Vec<_>>().join(",");
        let _ = writeln!(s, "status={}", if self.pass() { "PASS" } else { "FAIL" });
        let _ = writeln!(s, "k={}", self.k);
        let _ = writeln!(s, "max_eig_rel_error={:.6e}", self.max_eig_error());
        let _ = writeln!(s, "eig_rel_errors={}", list(&self.eig_rel_errors));
        let _ = writeln!(s, "max_eigvec_angle={:.6e}", self.max_angle());
        let _ = writeln!(s, "eigvec_angles={}", list(&self.eigvec_angles));
        let opt = |o: Option<f64>| o.map_or("none".to_string(), |x| format!("{x:.6e}"));
        let _ = writeln!(s, "variance_rel_error={}", opt(self.variance_rel_error));
        let _ = writeln!(s, "matvec_rel_error={}", opt(self.matvec_rel_error));
        let _ = writeln!(s, "dense_asymmetry={}", opt(self.dense_asymmetry));
        let _ = writeln!(s, "tol_eig_rel={:e}", self.tol.eig_rel);
        let _ = writeln!(s, "tol_angle={:e}", self.tol.angle);
        let _ = writeln!(s, "tol_variance_rel={:e}", self.tol.variance_rel);
        let _ = writeln!(s, "tol_matvec_rel={:e}", self.tol.matvec_rel);
        s
    }
}

/// Compares the leading `k` Ritz pairs (and optionally the variance field)
/// with the dense reference. Degenerate eigenvalues are compared through the
/// principal angle between the Ritz and dense eigenspaces of the cluster.
pub fn compare(
    lowrank: &ArnoldiResult<DVector<f64>>,
    posterior: Option<&PosteriorSummary>,
    dense: &DenseReference,
    k: usize,
    tol: Tolerances,
) -> Result<OracleReport> {
    let k = k.min(dense.eigenpairs.len());
    let dim = dense.eigenpairs.first().map_or(0, |p| p.1.len());
    let ritz = lowrank.ritz();
    if let Some(p) = ritz.first() {
        if p.vector.len() != dim {
            return Err(Error::mismatch((dim, 1), (p.vector.len(), 1)));
        }
    }
    let scale = dense.eigenpairs.first().map_or(0.0, |p| p.0.abs());
    let mut eig_rel_errors = Vec::with_capacity(k);
    for (i, (lam, _)) in dense.eigenpairs.iter().take(k).enumerate() {
        let err = match ritz.get(i) {
            Some(p) => (p.value.re - lam).abs() / lam.abs().max(f64::MIN_POSITIVE),
            None => 1.0,
        };
        eig_rel_errors.push(err);
    }
    let mut eigvec_angles = vec![0.0; k];
    let mut start = 0;
    while start < k {
        let mut end = start + 1;
        while end < dense.eigenpairs.len()
            && (dense.eigenpairs[end].0 - dense.eigenpairs[end - 1].0).abs() <= CLUSTER_REL * scale
        {
            end += 1;
        }
        let members = start..end.min(k);
        let angle = if members.end > ritz.len() {
            std::f64::consts::FRAC_PI_2
        } else {
            let ours = DMatrix::from_columns(&members.clone().map(|i| ritz[i].vector.clone()).collect::<Vec<_>>());
            let theirs = DMatrix::from_columns(&(start..end).map(|i| dense.eigenpairs[i].1.clone()).collect::<Vec<_>>());
            max_principal_angle(&ours, &theirs)
        };
        for i in members {
            eigvec_angles[i] = angle;
        }
        start = end;
    }
    let variance_rel_error = match (posterior, &dense.posterior_diag) {
        (Some(p), Some(d)) => {
            let v = p.variance();
            if v.len() != d.len() {
                return Err(Error::mismatch((d.len(), 1), (v.len(), 1)));
            }
            Some(v.iter().zip(d.iter()).map(|(a, b)| (a - b).abs() / b.abs()).fold(0.0, f64::max))
        }
        _ => None,
    };
    Ok(OracleReport {
        k,
        eig_rel_errors,
        eigvec_angles,
        variance_rel_error,
        matvec_rel_error: None,
        dense_asymmetry: None,
        tol,
    })
}

/// Worst relative disagreement of `H̃ v` between the matrix-free and dense
/// paths over `samples` seeded random vectors.
pub fn matvec_agreement(ctx: &mut HessianContext, misfit: &DenseMisfit, samples: usize, seed: u64) -> Result<f64> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let n = misfit.h_tilde.nrows();
    let mut worst: f64 = 0.0;
    for _ in 0..samples {
        let v = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        let want = &misfit.h_tilde * &v;
        let got = match ctx.spec().mode {
            ParameterMode::DistributedSource => {
                let (nx, nt) = (ctx.spec().grid.n_x(), ctx.spec().time.n_t());
                let field = crate::lowrank::LowRankMat::from_dense(
                    &DMatrix::from_column_slice(nx, nt, v.as_slice()),
                    &crate::lowrank::TruncationPolicy::new(1e-15)?,
                );
                let out = ctx.apply_space_time(&field)?.value.to_dense();
                DVector::from_column_slice(out.as_slice())
            }
            _ => ctx.apply_spatial(&v)?.value,
        };
        let denom = want.norm();
        let err = if denom > 0.0 { (&got - &want).norm() / denom } else { got.norm() };
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::discretize::{assemble_heat, build_grid, discrete_fd_eig, OperatorKind, TimeGrid};
    use crate::hessian::{CovarianceSpec, PriorPreset, SensorLayout};
    use crate::lowrank::TruncationPolicy;

    fn heat_spec(n_side: usize, n_t: usize, sensors: Option<SensorLayout>) -> ProblemSpec {
        let grid = build_grid(n_side).unwrap();
        ProblemSpec {
            grid,
            time: TimeGrid::unit(n_t).unwrap(),
            operator: OperatorKind::Heat,
            sensors: sensors.unwrap_or_else(|| SensorLayout::full(&grid)),
            cov: CovarianceSpec::from_preset(PriorPreset::Scalar(10.0), 1e4, &grid).unwrap(),
            mode: ParameterMode::InitialCondition,
        }
    }

    #[test]
    fn no_sensors_no_information() {
        let g = build_grid(5).unwrap();
        let d = dense_misfit(&heat_spec(5, 3, Some(SensorLayout::empty(&g))), DEFAULT_CAP).unwrap();
        assert_eq!(d.h_tilde.amax(), 0.0);
    }

    #[test]
    fn symmetric_and_semidefinite() {
        let d = dense_misfit(&heat_spec(7, 5, None), DEFAULT_CAP).unwrap();
        assert!(d.asymmetry <= 1e-10, "{}", d.asymmetry);
        let all = dense_eig_top(&d.h_tilde, 49).unwrap();
        assert!(all.iter().all(|p| p.0 >= -1e-12 * all[0].0));
    }

    #[test]
    fn trace_matches_matrix_free_diagonal() {
        let spec = heat_spec(7, 5, None);
        let d = dense_misfit(&spec, DEFAULT_CAP).unwrap();
        let mut ctx = HessianContext::new(spec, TruncationPolicy::default()).unwrap();
        let mut trace = 0.0;
        for i in 0..49 {
            let mut e = DVector::zeros(49);
            e[i] = 1.0;
            trace += ctx.apply_spatial(&e).unwrap().value[i];
        }
        assert!((trace - d.h_tilde.trace()).abs() <= 1e-10 * d.h_tilde.trace());
    }

    #[test]
    fn cap_is_enforced() {
        let spec = heat_spec(15, 10, None);
        assert!(matches!(dense_misfit(&spec, DEFAULT_CAP), Err(Error::OracleCap { dim: 2250, cap: 2000 })));
    }

    #[test]
    fn top_pairs_of_diagonal() {
        let d = DMatrix::from_diagonal(&DVector::from_vec(vec![3.0, 2.0, 1.0]));
        let top = dense_eig_top(&d, 2).unwrap();
        assert_eq!(top.len(), 2);
        assert!((top[0].0 - 3.0).abs() < 1e-14 && (top[1].0 - 2.0).abs() < 1e-14);
        assert!((top[0].1[0].abs() - 1.0).abs() < 1e-14);
        assert!((top[1].1[1].abs() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn laplacian_spectrum() {
        let g = build_grid(3).unwrap();
        let top = dense_eig_top(&dense_of(&assemble_heat(g)), 9).unwrap();
        assert!((top[0].0 - discrete_fd_eig(3, 3, &g).unwrap()).abs() < 1e-12 * top[0].0);
        assert!((top[8].0 - discrete_fd_eig(1, 1, &g).unwrap()).abs() < 1e-12 * top[0].0);
    }

    #[test]
    fn matrix_free_agrees_on_random_vectors() {
        let g = build_grid(15).unwrap();
        let sensors = SensorLayout::grid3x3(&g).unwrap();
        let mut spec = heat_spec(15, 8, Some(sensors));
        spec.operator = OperatorKind::ConvDiff { nu: 1e-2, wind: [0.0, 1.0] };
        let d = dense_misfit(&spec, DEFAULT_CAP).unwrap();
        let mut ctx = HessianContext::new(spec, TruncationPolicy::default()).unwrap();
        assert!(matvec_agreement(&mut ctx, &d, 20, 1).unwrap() <= 1e-8);
    }

    #[test]
    fn posterior_bounded_by_prior() {
        let g = build_grid(15).unwrap();
        let spec = heat_spec(15, 4, Some(SensorLayout::grid3x3(&g).unwrap()));
        let d = dense_misfit(&spec, DEFAULT_CAP).unwrap();
        let diag = dense_posterior_diag(&d).unwrap();
        assert!(diag.iter().all(|&v| v > 0.0 && v <= 10.0 * (1.0 + 1e-12)));
        let observed = spec.sensors.observed();
        assert!(observed.iter().all(|&k| diag[k] < 10.0));
    }

    #[test]
    fn principal_angles() {
        let e = |k: usize| {
            let mut v = DVector::zeros(3);
            v[k] = 1.0;
            v
        };
        let a = DMatrix::from_columns(&[e(0) + e(1)]);
        let b = DMatrix::from_columns(&[e(0), e(1)]);
        assert!(max_principal_angle(&a, &b) < 1e-15);
        let c = DMatrix::from_columns(&[e(2)]);
        assert!((max_principal_angle(&c, &b) - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
        assert_eq!(max_principal_angle(&b, &a), std::f64::consts::FRAC_PI_2);
    }

    #[test]
    fn report_format() {
        let r = OracleReport {
            k: 2,
            eig_rel_errors: vec![0.0, 1e-9],
            eigvec_angles: vec![0.0, 0.0],
            variance_rel_error: Some(1e-6),
            matvec_rel_error: None,
            dense_asymmetry: Some(0.0),
            tol: Tolerances::default(),
        };
        assert!(r.pass());
        let text = r.to_key_value();
        assert!(text.starts_with("status=PASS\n"));
        assert!(text.lines().all(|l| l.contains('=')));
        let bad = OracleReport {
            eig_rel_errors: vec![1e-3, 0.0],
            ..r
        };
        assert!(!bad.pass());
        assert!(bad.to_key_value().starts_with("status=FAIL"));
    }
}
