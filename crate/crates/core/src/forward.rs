//! The all-at-once implicit-Euler space-time operator and its low-rank solvers.
//!
//! With step matrix `S = M(I + τL)` and lumped mass `M = h^d`, block `k` of
//! `K·vec(Y)` is `S y_k − M y_{k−1}` (`y_{−1} = 0`). Fields are
//! [`LowRankMat`]s with one column per time step.

use nalgebra::{DMatrix, DVector};
use nalgebra_sparse::CsrMatrix;

use crate::banded::BandedLu;
use crate::discretize::{SpatialOperator, TimeGrid};
use crate::lowrank::{orthogonalize, LowRankMat, TruncationPolicy};
use crate::{Error, Result};

pub const DEFAULT_COMPRESS_EVERY: usize = 4;

#[derive(Debug, Clone)]
pub struct SpaceTimeOperator {
    spatial: SpatialOperator,
    time: TimeGrid,
    step: CsrMatrix<f64>,
    step_t: CsrMatrix<f64>,
    lu: BandedLu,
    compress_every: usize,
}

/// Result of a time-stepping solve.
#[derive(Debug, Clone)]
pub struct SweepOutput {
    pub field: LowRankMat,
    /// Largest rank held by the accumulated solution during the sweep.
    pub max_rank: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KrylovOptions {
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for KrylovOptions {
    fn default() -> Self {
        KrylovOptions {
            max_iter: 200,
            tol: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct KrylovOutput {
    pub field: LowRankMat,
    pub iterations: usize,
    /// Relative residual of the returned field, measured after recompression.
    pub residual: f64,
    pub rank_trace: Vec<usize>,
    pub converged: bool,
}

impl KrylovOutput {
    pub fn max_rank(&self) -> usize {
        self.rank_trace.iter().copied().max().unwrap_or(0)
    }

    /// Turns a stalled solve into a convergence error.
    pub fn into_result(self) -> Result<Self> {
        if self.converged {
            Ok(self)
        } else {
            Err(Error::Convergence {
                solver: "low-rank gmres",
                iterations: self.iterations,
                residual: self.residual,
            })
        }
    }
}

/// Which solver realizes `K⁻¹` and `K⁻ᵀ`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum SolverBackend {
    #[default]
    Sweep,
    Krylov(KrylovOptions),
}

impl SpaceTimeOperator {
    pub fn new(spatial: SpatialOperator, time: TimeGrid) -> Result<Self> {
        let n = spatial.grid().n_x();
        let m = spatial.mass_scale();
        let step = CsrMatrix::identity(n) * m + spatial.matrix() * (m * time.tau());
        let lu = BandedLu::factor(&step)?;
        Ok(SpaceTimeOperator {
            step_t: step.transpose(),
            step,
            spatial,
            time,
            lu,
            compress_every: DEFAULT_COMPRESS_EVERY,
        })
    }

    pub fn with_compress_every(mut self, p: usize) -> Result<Self> {
        if p == 0 {
            return Err(Error::InvalidConfig("compression cadence must be positive".into()));
        }
        self.compress_every = p;
        Ok(self)
    }

    pub fn spatial(&self) -> &SpatialOperator {
        &self.spatial
    }

    pub fn time(&self) -> &TimeGrid {
        &self.time
    }

    pub fn step_matrix(&self) -> &CsrMatrix<f64> {
        &self.step
    }

    pub fn mass_scale(&self) -> f64 {
        self.spatial.mass_scale()
    }

    pub fn n_x(&self) -> usize {
        self.step.nrows()
    }

    pub fn n_t(&self) -> usize {
        self.time.n_t()
    }

    pub fn compress_every(&self) -> usize {
        self.compress_every
    }

    fn check(&self, y: &LowRankMat) -> Result<()> {
        let want = (self.n_x(), self.n_t());
        if y.shape() != want {
            return Err(Error::mismatch(want, y.shape()));
        }
        Ok(())
    }

    /// `K·vec(Y)` in factored form, rank `2r`, not recompressed.
    pub fn apply(&self, y: &LowRankMat) -> Result<LowRankMat> {
        self.apply_impl(y, false)
    }

    pub fn apply_transpose(&self, y: &LowRankMat) -> Result<LowRankMat> {
        self.apply_impl(y, true)
    }

    fn apply_impl(&self, y: &LowRankMat, transpose: bool) -> Result<LowRankMat> {
        self.check(y)?;
        if y.rank() == 0 {
            return Ok(y.clone());
        }
        let s = if transpose { &self.step_t } else { &self.step };
        let w1 = y.w1();
        let w2 = y.w2();
        let n_t = self.n_t();
        let mut shifted = DMatrix::zeros(n_t, y.rank());
        if transpose {
            shifted.rows_mut(0, n_t - 1).copy_from(&w2.rows(1, n_t - 1));
        } else {
            shifted.rows_mut(1, n_t - 1).copy_from(&w2.rows(0, n_t - 1));
        }
        let left = crate::lowrank::hcat(&(s * w1), &(w1 * -self.mass_scale()));
        let right = crate::lowrank::hcat(w2, &shifted);
        LowRankMat::new(left, right)
    }

    /// Block-diagonal preconditioner `P⁻¹ = I ⊗ S⁻¹` (or `S⁻ᵀ`); rank preserving.
    pub fn precondition(&self, y: &LowRankMat, transpose: bool) -> LowRankMat {
        y.map_spatial(|w1| {
            if transpose {
                self.lu.solve_transpose_matrix(w1)
            } else {
                self.lu.solve_matrix(w1)
            }
        })
    }

    /// Forward substitution in time.
    pub fn solve_sweep(&self, rhs: &LowRankMat, pol: &TruncationPolicy) -> Result<SweepOutput> {
        self.sweep(rhs, pol, false)
    }

    /// Backward substitution in time with the transposed step matrix.
    pub fn solve_adjoint_sweep(&self, rhs: &LowRankMat, pol: &TruncationPolicy) -> Result<SweepOutput> {
        self.sweep(rhs, pol, true)
    }

    fn sweep(&self, rhs: &LowRankMat, pol: &TruncationPolicy, adjoint: bool) -> Result<SweepOutput> {
        self.check(rhs)?;
        let (n_x, n_t) = (self.n_x(), self.n_t());
        let m = self.mass_scale();
        let mut acc = LowRankMat::zeros(n_x, n_t);
        let mut max_rank = 0;
        if rhs.rank() == 0 {
            return Ok(SweepOutput { field: acc, max_rank });
        }
        let order: Box<dyn Iterator<Item = usize>> = if adjoint {
            Box::new((0..n_t).rev())
        } else {
            Box::new(0..n_t)
        };
        // the previous step is propagated exactly; only the stored pane is compressed
        let mut prev = DVector::<f64>::zeros(n_x);
        let mut pending: Vec<(usize, DVector<f64>)> = Vec::with_capacity(self.compress_every);
        for (count, k) in order.enumerate() {
            let mut y = rhs.column(k);
            y.axpy(m, &prev, 1.0);
            if adjoint {
                self.lu.solve_transpose_in_place(y.as_mut_slice());
            } else {
                self.lu.solve_in_place(y.as_mut_slice());
            }
            prev.copy_from(&y);
            pending.push((k, y));
            if pending.len() == self.compress_every || count + 1 == n_t {
                let q = pending.len();
                let mut w1 = DMatrix::zeros(n_x, q);
                let mut w2 = DMatrix::zeros(n_t, q);
                for (c, (k, y)) in pending.drain(..).enumerate() {
                    w1.set_column(c, &y);
                    w2[(k, c)] = 1.0;
                }
                acc = acc.add(&LowRankMat::new(w1, w2)?)?.truncate(pol);
                max_rank = max_rank.max(acc.rank());
            }
        }
        Ok(SweepOutput { field: acc, max_rank })
    }

    /// Right-preconditioned low-rank GMRES for `K x = rhs`. A stalled
    /// iteration is reported through [`KrylovOutput::converged`].
    pub fn solve_krylov(
        &self,
        rhs: &LowRankMat,
        pol: &TruncationPolicy,
        opts: &KrylovOptions,
    ) -> Result<KrylovOutput> {
        self.gmres(rhs, pol, opts, false)
    }

    /// As [`Self::solve_krylov`] for `Kᵀ x = rhs`.
    pub fn solve_krylov_transpose(
        &self,
        rhs: &LowRankMat,
        pol: &TruncationPolicy,
        opts: &KrylovOptions,
    ) -> Result<KrylovOutput> {
        self.gmres(rhs, pol, opts, true)
    }

    fn gmres(
        &self,
        rhs: &LowRankMat,
        pol: &TruncationPolicy,
        opts: &KrylovOptions,
        transpose: bool,
    ) -> Result<KrylovOutput> {
        self.check(rhs)?;
        let beta = rhs.norm();
        let mut rank_trace = Vec::new();
        if beta == 0.0 {
            return Ok(KrylovOutput {
                field: rhs.clone(),
                iterations: 0,
                residual: 0.0,
                rank_trace,
                converged: true,
            });
        }
        let op = |v: &LowRankMat| -> Result<LowRankMat> {
            let z = self.precondition(v, transpose);
            Ok(self.apply_impl(&z, transpose)?.truncate(pol))
        };
        let first = rhs.scale(1.0 / beta).truncate(pol);
        rank_trace.push(first.rank());
        let mut basis = vec![first];
        let mut h = DMatrix::<f64>::zeros(opts.max_iter + 1, opts.max_iter);
        let mut y = DVector::zeros(0);
        let mut estimate = 1.0;
        let mut iterations = 0;
        for j in 0..opts.max_iter {
            let w = op(&basis[j])?;
            let (w, coeffs) = orthogonalize(w, &basis, pol);
            for (i, c) in coeffs.iter().enumerate() {
                h[(i, j)] = *c;
            }
            let hn = w.norm();
            h[(j + 1, j)] = hn;
            iterations = j + 1;
            let (sol, res) = least_squares(&h.view((0, 0), (j + 2, j + 1)).into_owned(), beta);
            y = sol;
            estimate = res / beta;
            rank_trace.push(w.rank());
            if estimate <= opts.tol || hn <= 1e-14 * beta {
                break;
            }
            basis.push(w.scale(1.0 / hn).truncate(pol));
        }
        let mut z = LowRankMat::zeros(self.n_x(), self.n_t());
        for (c, v) in y.iter().zip(&basis) {
            z = z.add(&v.scale(*c))?;
        }
        let field = self.precondition(&z.truncate(pol), transpose).truncate(pol);
        let residual = residual_norm(&self.apply_impl(&field, transpose)?, rhs)? / beta;
        // truncation of the iterate limits the attainable true residual
        let converged = estimate <= opts.tol && residual <= 10.0 * opts.tol.max(10.0 * pol.eps0);
        Ok(KrylovOutput {
            field,
            iterations,
            residual,
            rank_trace,
            converged,
        })
    }

    /// Relative space-time residual `‖K·vec(Y) − vec(rhs)‖ / ‖vec(rhs)‖`.
    pub fn relative_residual(&self, y: &LowRankMat, rhs: &LowRankMat, transpose: bool) -> Result<f64> {
        let ky = self.apply_impl(y, transpose)?;
        Ok(residual_norm(&ky, rhs)? / rhs.norm())
    }
}

/// `‖a − b‖_F` from the triangular factors of the stacked factors, which
/// keeps small differences accurate where the Gram form would cancel.
fn residual_norm(a: &LowRankMat, b: &LowRankMat) -> Result<f64> {
    let d = a.add(&b.scale(-1.0))?;
    if d.rank() == 0 {
        return Ok(0.0);
    }
    let r1 = d.w1().clone().qr().r();
    let r2 = d.w2().clone().qr().r();
    Ok((r1 * r2.transpose()).norm())
}

/// `min ‖β e₁ − H y‖` for a small Hessenberg `H`; returns `(y, residual)`.
fn least_squares(h: &DMatrix<f64>, beta: f64) -> (DVector<f64>, f64) {
    let mut rhs = DVector::zeros(h.nrows());
    rhs[0] = beta;
    let svd = crate::lowrank::accurate_svd(h.clone());
    let y = svd
        .solve(&rhs, 1e-14 * svd.singular_values.max())
        .unwrap_or_else(|_| DVector::zeros(h.ncols()));
    let res = (&rhs - h * &y).norm();
    (y, res)
}

/// Parameter-to-state injection for an initial-condition parameter:
/// block 0 of the right-hand side is `M u`, all later blocks vanish.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitInjection {
    mass_scale: f64,
    n_t: usize,
}

impl InitInjection {
    pub fn new(op: &SpaceTimeOperator) -> Self {
        InitInjection {
            mass_scale: op.mass_scale(),
            n_t: op.n_t(),
        }
    }

    pub fn inject(&self, u: &DVector<f64>) -> LowRankMat {
        let mut e = DVector::zeros(self.n_t);
        e[0] = 1.0;
        LowRankMat::outer(&(u * self.mass_scale), &e)
    }

    /// Adjoint of [`Self::inject`]: `M` times the first time slice.
    pub fn extract(&self, y: &LowRankMat) -> DVector<f64> {
        y.column(0) * self.mass_scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::discretize::{
        analytic_separable_eigvec, assemble_convdiff, assemble_heat, build_grid, discrete_fd_eig,
        spatial_vector, Grid,
    };
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn heat(n_side: usize, n_t: usize) -> SpaceTimeOperator {
        let g = build_grid(n_side).unwrap();
        SpaceTimeOperator::new(assemble_heat(g), TimeGrid::unit(n_t).unwrap()).unwrap()
    }

    fn convdiff(n_side: usize, n_t: usize) -> SpaceTimeOperator {
        let g = build_grid(n_side).unwrap();
        let op = assemble_convdiff(g, 1e-2, [0.0, 1.0]).unwrap();
        SpaceTimeOperator::new(op, TimeGrid::unit(n_t).unwrap()).unwrap()
    }

    /// Dense all-at-once matrix, assembled block by block from the sparse operator.
    fn dense_k(op: &SpaceTimeOperator) -> DMatrix<f64> {
        let (n, nt) = (op.n_x(), op.n_t());
        let mut k = DMatrix::zeros(n * nt, n * nt);
        for b in 0..nt {
            for (i, j, v) in op.step_matrix().triplet_iter() {
                k[(b * n + i, b * n + j)] += *v;
            }
            if b > 0 {
                for i in 0..n {
                    k[(b * n + i, (b - 1) * n + i)] = -op.mass_scale();
                }
            }
        }
        k
    }

    fn vec_of(y: &LowRankMat) -> DVector<f64> {
        DVector::from_column_slice(y.to_dense().as_slice())
    }

    fn random_field(rng: &mut ChaCha8Rng, n: usize, nt: usize, r: usize) -> LowRankMat {
        let w1 = DMatrix::from_fn(n, r, |_, _| rng.random_range(-1.0..1.0));
        let w2 = DMatrix::from_fn(nt, r, |_, _| rng.random_range(-1.0..1.0));
        LowRankMat::new(w1, w2).unwrap()
    }

    fn first_mode(g: &Grid) -> DVector<f64> {
        spatial_vector(&analytic_separable_eigvec(1, 1, g).unwrap())
    }

    #[test]
    fn vanishing_step_keeps_initial_state() {
        let g = build_grid(7).unwrap();
        let time = TimeGrid::new(6, 6e-12).unwrap();
        let op = SpaceTimeOperator::new(assemble_heat(g), time).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let u = DVector::from_fn(g.n_x(), |_, _| rng.random_range(-1.0..1.0));
        let out = op.solve_sweep(&InitInjection::new(&op).inject(&u), &TruncationPolicy::default()).unwrap();
        assert_eq!(out.field.rank(), 1);
        for k in 0..6 {
            let d = (out.field.column(k) - &u).amax(); assert!(d < 1e-8, "{k} {d} {}", out.field.rank());
        }
    }

    #[test]
    fn eigenvector_decays_geometrically() {
        let op = heat(15, 12);
        let g = *op.spatial().grid();
        let v = first_mode(&g);
        let lam = discrete_fd_eig(1, 1, &g).unwrap();
        let rho = 1.0 / (1.0 + op.time().tau() * lam);
        let out = op.solve_sweep(&InitInjection::new(&op).inject(&v), &TruncationPolicy::default()).unwrap();
        assert_eq!(out.field.rank(), 1);
        for k in 0..12 {
            let expect = &v * rho.powi(k as i32 + 1);
            assert!((out.field.column(k) - &expect).norm() <= 1e-10 * expect.norm());
        }
    }

    #[test]
    fn adjoint_decays_backward_in_time() {
        let op = heat(15, 8);
        let g = *op.spatial().grid();
        let v = first_mode(&g);
        let lam = discrete_fd_eig(1, 1, &g).unwrap();
        let rho = 1.0 / (1.0 + op.time().tau() * lam);
        let mut e = DVector::zeros(8);
        e[7] = 1.0;
        let rhs = LowRankMat::outer(&(&v * op.mass_scale()), &e);
        let out = op.solve_adjoint_sweep(&rhs, &TruncationPolicy::default()).unwrap();
        assert_eq!(out.field.rank(), 1);
        for k in 0..8 {
            let expect = &v * rho.powi(8 - k as i32);
            assert!((out.field.column(k) - &expect).norm() <= 1e-10 * expect.norm());
        }
    }

    #[test]
    fn sweeps_match_dense_solve() {
        let pol = TruncationPolicy::default();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for op in [heat(7, 5), convdiff(7, 5)] {
            let k = dense_k(&op);
            let lu = k.clone().lu();
            let mut u = DVector::from_fn(op.n_x(), |_, _| rng.random_range(-1.0..1.0));
            u.normalize_mut();
            let rhs = InitInjection::new(&op).inject(&u);
            let y = vec_of(&op.solve_sweep(&rhs, &pol).unwrap().field);
            let exact = lu.solve(&vec_of(&rhs)).unwrap();
            assert!((&y - &exact).norm() <= 1e-8 * exact.norm());

            let rhs = random_field(&mut rng, op.n_x(), op.n_t(), 2);
            let y = vec_of(&op.solve_adjoint_sweep(&rhs, &pol).unwrap().field);
            let exact = k.transpose().lu().solve(&vec_of(&rhs)).unwrap();
            assert!((&y - &exact).norm() <= 1e-8 * exact.norm());
        }
    }

    #[test]
    fn apply_matches_dense_operator() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let op = convdiff(5, 4);
        let k = dense_k(&op);
        let y = random_field(&mut rng, op.n_x(), op.n_t(), 3);
        let ky = vec_of(&op.apply(&y).unwrap());
        assert!((&ky - &k * vec_of(&y)).amax() < 1e-12 * ky.amax());
        let kty = vec_of(&op.apply_transpose(&y).unwrap());
        assert!((&kty - k.transpose() * vec_of(&y)).amax() < 1e-12 * kty.amax());
    }

    #[test]
    fn adjoint_consistency() {
        let pol = TruncationPolicy::default();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let op = convdiff(15, 10);
        for _ in 0..3 {
            let a = random_field(&mut rng, op.n_x(), op.n_t(), 2);
            let b = random_field(&mut rng, op.n_x(), op.n_t(), 3);
            let ka = op.solve_sweep(&a, &pol).unwrap().field;
            let ktb = op.solve_adjoint_sweep(&b, &pol).unwrap().field;
            let lhs = ka.dot(&b).unwrap();
            let rhs = a.dot(&ktb).unwrap();
            assert!((lhs - rhs).abs() <= 1e-8 * ka.norm() * b.norm());
        }
    }

    #[test]
    fn residual_contract() {
        let pol = TruncationPolicy::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for op in [heat(31, 30), convdiff(31, 30)] {
            let bound = 10.0 * pol.eps0 * op.n_t() as f64;
            let rhs = random_field(&mut rng, op.n_x(), op.n_t(), 2);
            let y = op.solve_sweep(&rhs, &pol).unwrap().field;
            assert!(op.relative_residual(&y, &rhs, false).unwrap() <= bound);
            let y = op.solve_adjoint_sweep(&rhs, &pol).unwrap().field;
            assert!(op.relative_residual(&y, &rhs, true).unwrap() <= bound);
            let mut u = DVector::from_fn(op.n_x(), |_, _| rng.random_range(-1.0..1.0));
            u.normalize_mut();
            let rhs = InitInjection::new(&op).inject(&u);
            let y = op.solve_sweep(&rhs, &pol).unwrap().field;
            assert!(op.relative_residual(&y, &rhs, false).unwrap() <= bound);
        }
    }

    #[test]
    fn rank_stays_bounded_as_steps_grow() {
        let pol = TruncationPolicy::default();
        let mut ranks = Vec::new();
        for n_t in [30, 60, 90] {
            let op = heat(31, n_t);
            let u = DVector::from_element(op.n_x(), 1.0 / (op.n_x() as f64).sqrt());
            let out = op.solve_sweep(&InitInjection::new(&op).inject(&u), &pol).unwrap();
            ranks.push(out.max_rank);
        }
        let (lo, hi) = (ranks.iter().min().unwrap(), ranks.iter().max().unwrap());
        assert!(*hi <= 40 && hi - lo <= 5, "{ranks:?}");
    }

    #[test]
    fn krylov_agrees_with_sweep() {
        let pol = TruncationPolicy::default();
        let op = heat(15, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let rhs = random_field(&mut rng, op.n_x(), op.n_t(), 2);
        let opts = KrylovOptions::default();
        let a = op.solve_sweep(&rhs, &pol).unwrap().field;
        let b = op.solve_krylov(&rhs, &pol, &opts).unwrap().into_result().unwrap();
        let diff = (a.to_dense() - b.field.to_dense()).norm() / a.to_dense().norm();
        assert!(diff <= 1e-6, "{diff}");
        let a = op.solve_adjoint_sweep(&rhs, &pol).unwrap().field;
        let b = op.solve_krylov_transpose(&rhs, &pol, &opts).unwrap().into_result().unwrap();
        let diff = (a.to_dense() - b.field.to_dense()).norm() / a.to_dense().norm();
        assert!(diff <= 1e-6, "{diff}");
    }

    #[test]
    fn single_block_needs_one_iteration() {
        let op = heat(15, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let rhs = random_field(&mut rng, op.n_x(), 1, 1);
        let out = op
            .solve_krylov(&rhs, &TruncationPolicy::default(), &KrylovOptions::default())
            .unwrap();
        assert_eq!(out.iterations, 1);
        assert!(out.converged && out.residual <= 1e-8);
    }

    #[test]
    fn krylov_rank_cap() {
        let pol = TruncationPolicy::new(1e-8).unwrap().with_rank_cap(3);
        let op = heat(15, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let rhs = random_field(&mut rng, op.n_x(), op.n_t(), 2);
        let opts = KrylovOptions {
            max_iter: 15,
            tol: 1e-8,
        };
        let out = op.solve_krylov(&rhs, &pol, &opts).unwrap();
        assert!(out.rank_trace.iter().all(|&r| r <= 3));
        assert!(out.field.rank() <= 3);
        if !out.converged {
            assert!(matches!(out.into_result(), Err(Error::Convergence { .. })));
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let op = heat(5, 3);
        let bad = LowRankMat::zeros(25, 4);
        assert!(op.solve_sweep(&bad, &TruncationPolicy::default()).is_err());
        assert!(op.apply(&bad).is_err());
        assert!(op.clone().with_compress_every(0).is_err());
    }
}
