//! Arnoldi iteration over dense or low-rank vectors with full
//! reorthogonalization, and Ritz extraction from the Hessenberg matrix.

use std::time::Instant;

use nalgebra::{DMatrix, DVector, Schur};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::lowrank::{accurate_svd, orthogonalize, KrylovVector, TruncationPolicy};
use crate::{Error, Result};

/// Relative size of `h_{j+1,j}` below which the Krylov space is invariant.
pub const BREAKDOWN_TOL: f64 = 1e-14;

/// Ritz values closer than this (relative) share a cluster whose vectors
/// are orthogonalized against each other.
const RITZ_CLUSTER_REL: f64 = 1e-6;

/// An operator application together with the largest rank it produced.
#[derive(Debug, Clone)]
pub struct Applied<V> {
    pub value: V,
    pub max_rank: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StopRule {
    pub m_a: usize,
    pub eps_eig: f64,
    pub check_every: usize,
    /// Relative change and residual allowed for retained Ritz values.
    pub stability: f64,
    /// Continue from a fresh orthogonal vector after an invariant subspace
    /// has been found, instead of stopping.
    pub restart_on_breakdown: bool,
}

impl StopRule {
    pub fn new(m_a: usize, eps_eig: f64) -> Result<Self> {
        if m_a == 0 {
            return Err(Error::InvalidConfig("m_a must be at least 1".into()));
        }
        if !(eps_eig > 0.0) {
            return Err(Error::InvalidConfig(format!("eps_eig must be positive, got {eps_eig}")));
        }
        Ok(StopRule {
            m_a,
            eps_eig,
            check_every: 10,
            stability: 1e-3,
            restart_on_breakdown: false,
        })
    }

    pub fn with_check_every(mut self, every: usize) -> Self {
        self.check_every = every.max(1);
        self
    }

    /// Tighter values trade iterations for more accurate retained pairs.
    pub fn with_stability(mut self, rel: f64) -> Self {
        self.stability = rel;
        self
    }

    pub fn with_restart(mut self, on: bool) -> Self {
        self.restart_on_breakdown = on;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    /// Retained Ritz values stopped moving.
    Converged,
    MaxIterations,
    /// Invariant subspace reached.
    Breakdown,
}

/// Diagnostics for one iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationRecord {
    pub j: usize,
    pub h_next: f64,
    pub max_rank: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct RitzPair<V> {
    pub value: Complex64,
    /// Real Ritz vector of unit norm (the real part after a phase rotation
    /// for complex values).
    pub vector: V,
    /// `|h_{m+1,m} y_m|`, the Arnoldi residual estimate.
    pub residual: f64,
}

#[derive(Debug, Clone)]
pub struct ArnoldiResult<V> {
    h: DMatrix<f64>,
    basis: Vec<V>,
    rank_trace: Vec<usize>,
    ritz: Vec<RitzPair<V>>,
    converged_count: usize,
    stop_reason: StopReason,
    records: Vec<IterationRecord>,
    breakdowns: Vec<usize>,
}

impl<V: KrylovVector> ArnoldiResult<V> {
    /// The `(m+1) × m` Hessenberg matrix.
    pub fn h(&self) -> &DMatrix<f64> {
        &self.h
    }

    pub fn iterations(&self) -> usize {
        self.h.ncols()
    }

    pub fn basis(&self) -> &[V] {
        &self.basis
    }

    pub fn rank_trace(&self) -> &[usize] {
        &self.rank_trace
    }

    pub fn max_rank(&self) -> usize {
        self.rank_trace.iter().copied().max().unwrap_or(0)
    }

    /// Ritz pairs sorted by descending real part.
    pub fn ritz(&self) -> &[RitzPair<V>] {
        &self.ritz
    }

    pub fn converged_count(&self) -> usize {
        self.converged_count
    }

    pub fn stop_reason(&self) -> StopReason {
        self.stop_reason
    }

    pub fn invariant_subspace(&self) -> bool {
        !self.breakdowns.is_empty()
    }

    /// Iterations after which an invariant subspace was detected.
    pub fn breakdowns(&self) -> &[usize] {
        &self.breakdowns
    }

    pub fn records(&self) -> &[IterationRecord] {
        &self.records
    }

    /// `max |⟨v_i, v_j⟩ − δ_ij|` over the stored basis.
    pub fn orthogonality_defect(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for (i, a) in self.basis.iter().enumerate() {
            for (j, b) in self.basis.iter().enumerate().skip(i) {
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((a.dot(b) - target).abs());
            }
        }
        worst
    }

    /// `max |Im θ| / max |Re θ|` over all Ritz values.
    pub fn max_relative_imag(&self) -> f64 {
        let re = self.ritz.iter().map(|p| p.value.re.abs()).fold(0.0, f64::max);
        let im = self.ritz.iter().map(|p| p.value.im.abs()).fold(0.0, f64::max);
        if re > 0.0 {
            im / re
        } else {
            im
        }
    }

    /// Ritz pairs with real part at least `eps_eig`.
    pub fn retained(&self, eps_eig: f64) -> Vec<&RitzPair<V>> {
        self.ritz.iter().filter(|p| p.value.re >= eps_eig).collect()
    }
}

/// Normalized all-ones start vector.
pub fn ones_start(n: usize) -> DVector<f64> {
    DVector::from_element(n, 1.0 / (n as f64).sqrt())
}

/// Seeded uniform random start vector, normalized.
pub fn random_start(n: usize, seed: u64) -> DVector<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0)).normalize()
}

/// Arnoldi iteration; stops at `m_a`, convergence, or the first breakdown.
pub fn lr_arnoldi<V, F>(apply: F, v1: V, pol: &TruncationPolicy, stop: &StopRule) -> Result<ArnoldiResult<V>>
where
    V: KrylovVector,
    F: FnMut(&V) -> Result<Applied<V>>,
{
    run(apply, v1, None::<fn(usize) -> V>, pol, &stop.with_restart(false))
}

/// As [`lr_arnoldi`], but after a breakdown the iteration continues from
/// `fresh(j)` orthogonalized against the basis, so repeated eigenvalues that a
/// single Krylov sequence cannot see are still reached.
pub fn lr_arnoldi_with_restart<V, F, R>(
    apply: F,
    v1: V,
    fresh: R,
    pol: &TruncationPolicy,
    stop: &StopRule,
) -> Result<ArnoldiResult<V>>
where
    V: KrylovVector,
    F: FnMut(&V) -> Result<Applied<V>>,
    R: FnMut(usize) -> V,
{
    run(apply, v1, Some(fresh), pol, &stop.with_restart(true))
}

fn run<V, F, R>(mut apply: F, v1: V, mut fresh: Option<R>, pol: &TruncationPolicy, stop: &StopRule) -> Result<ArnoldiResult<V>>
where
    V: KrylovVector,
    F: FnMut(&V) -> Result<Applied<V>>,
    R: FnMut(usize) -> V,
{
    let v1 = v1.compress(pol);
    let n0 = v1.norm();
    if !(n0 > 0.0 && n0.is_finite()) {
        return Err(Error::InvalidConfig("start vector must be nonzero and finite".into()));
    }
    let mut basis = vec![v1.scale(1.0 / n0)];
    let mut h = DMatrix::<f64>::zeros(stop.m_a + 1, stop.m_a);
    let mut rank_trace = Vec::new();
    let mut records = Vec::new();
    let mut breakdowns = Vec::new();
    let mut previous: Option<Vec<Complex64>> = None;
    let mut reason = StopReason::MaxIterations;
    let mut m = 0;
    let clock = Instant::now();

    for j in 0..stop.m_a {
        let Applied { value: w, max_rank } = apply(&basis[j])?;
        let scale = w.norm();
        let (w, coeffs) = orthogonalize(w, &basis, pol);
        for (i, c) in coeffs.iter().enumerate() {
            h[(i, j)] = *c;
        }
        let hn = w.norm();
        m = j + 1;
        let rank = max_rank.max(w.rank().unwrap_or(0)).max(basis[j].rank().unwrap_or(0));
        rank_trace.push(rank);
        let invariant = !(hn > BREAKDOWN_TOL * scale);
        records.push(IterationRecord {
            j,
            h_next: if invariant { 0.0 } else { hn },
            max_rank: rank,
            seconds: clock.elapsed().as_secs_f64(),
        });
        if invariant {
            breakdowns.push(m);
            let next = match fresh.as_mut() {
                Some(gen) if m < stop.m_a => {
                    let r = gen(j).compress(pol);
                    let rn = r.norm();
                    let (r, _) = orthogonalize(r, &basis, pol);
                    let left = r.norm();
                    // nothing left outside the basis: the whole space is spanned
                    if left > 1e-8 * rn {
                        Some(r.scale(1.0 / left))
                    } else {
                        None
                    }
                }
                _ => None,
            };
            match next {
                Some(v) => basis.push(v),
                None => {
                    reason = StopReason::Breakdown;
                    break;
                }
            }
        } else {
            h[(j + 1, j)] = hn;
            basis.push(w.scale(1.0 / hn));
        }

        if m % stop.check_every == 0 && m < stop.m_a {
            let block = h.view((0, 0), (m, m)).into_owned();
            let values = ritz_values(&block)?;
            let above: Vec<Complex64> = values.iter().copied().filter(|v| v.re >= stop.eps_eig).collect();
            if let Some(prev) = &previous {
                let prev_above: Vec<&Complex64> = prev.iter().filter(|v| v.re >= stop.eps_eig).collect();
                let stable = prev_above.len() == above.len()
                    && above
                        .iter()
                        .zip(&prev_above)
                        .all(|(a, b)| (a - *b).norm() <= stop.stability * a.norm());
                if stable && residuals_small(&block, h[(m, m - 1)], &above, stop.stability)? {
                    reason = StopReason::Converged;
                    break;
                }
            }
            previous = Some(values);
        }
    }

    let hm = h.view((0, 0), (m + 1, m)).into_owned();
    let block = hm.view((0, 0), (m, m)).into_owned();
    let ritz = ritz_pairs(&block, hm[(m, m - 1)], &basis[..m], pol)?;
    let converged_count = ritz
        .iter()
        .filter(|p| p.value.re >= stop.eps_eig && p.residual <= stop.stability * p.value.norm())
        .count();
    basis.truncate(if reason == StopReason::Breakdown { m } else { m + 1 });
    Ok(ArnoldiResult {
        h: hm,
        basis,
        rank_trace,
        ritz,
        converged_count,
        stop_reason: reason,
        records,
        breakdowns,
    })
}

fn residuals_small(block: &DMatrix<f64>, h_next: f64, values: &[Complex64], tol: f64) -> Result<bool> {
    if h_next == 0.0 {
        return Ok(true);
    }
    let mut found: Vec<DVector<Complex64>> = Vec::new();
    for (i, &theta) in values.iter().enumerate() {
        let cluster: Vec<&DVector<Complex64>> = found
            .iter()
            .enumerate()
            .filter(|(k, _)| in_cluster(values[*k], theta))
            .map(|(_, y)| y)
            .collect();
        let y = hessenberg_eigvec(block, theta, &cluster)?;
        let res = h_next.abs() * y[y.len() - 1].norm();
        if res > tol * theta.norm() {
            return Ok(false);
        }
        found.push(y);
        let _ = i;
    }
    Ok(true)
}

fn in_cluster(a: Complex64, b: Complex64) -> bool {
    (a - b).norm() <= RITZ_CLUSTER_REL * a.norm().max(b.norm())
}

/// Eigenvalues of a square upper Hessenberg block, by descending real part.
pub fn ritz_values(block: &DMatrix<f64>) -> Result<Vec<Complex64>> {
    let m = block.nrows();
    if m == 0 {
        return Ok(Vec::new());
    }
    if m == 1 {
        return Ok(vec![Complex64::new(block[(0, 0)], 0.0)]);
    }
    let schur = Schur::try_new(block.clone(), f64::EPSILON, 100_000)
        .ok_or_else(|| Error::Eigen("Hessenberg eigenvalue iteration did not converge".into()))?;
    let mut vals: Vec<Complex64> = schur.complex_eigenvalues().iter().copied().collect();
    vals.sort_by(|a, b| b.re.total_cmp(&a.re).then(b.im.total_cmp(&a.im)));
    Ok(vals)
}

/// Ritz pairs of the `m × m` block `H` with subdiagonal continuation
/// `h_next`, vectors formed from `basis`.
pub fn ritz_pairs<V: KrylovVector>(
    block: &DMatrix<f64>,
    h_next: f64,
    basis: &[V],
    pol: &TruncationPolicy,
) -> Result<Vec<RitzPair<V>>> {
    let m = block.nrows();
    if block.ncols() != m || basis.len() < m {
        return Err(Error::mismatch((m, m), (block.ncols(), basis.len())));
    }
    let values = ritz_values(block)?;
    let mut coords: Vec<DVector<Complex64>> = Vec::with_capacity(m);
    let mut out = Vec::with_capacity(m);
    for (i, &theta) in values.iter().enumerate() {
        let cluster: Vec<&DVector<Complex64>> = coords
            .iter()
            .enumerate()
            .filter(|(k, _)| in_cluster(values[*k], theta))
            .map(|(_, y)| y)
            .collect();
        let y = hessenberg_eigvec(block, theta, &cluster)?;
        let residual = h_next.abs() * y[m - 1].norm();
        let real = real_coordinates(&y);
        let mut v = basis[0].scale(real[0]);
        for (c, b) in real.iter().zip(basis).skip(1) {
            v = v.axpy_exact(*c, b);
        }
        let v = v.compress(pol);
        let nv = v.norm();
        let vector = if nv > 0.0 { v.scale(1.0 / nv) } else { v };
        out.push(RitzPair {
            value: theta,
            vector,
            residual,
        });
        coords.push(y);
        let _ = i;
    }
    Ok(out)
}

/// Rotates `y` so that its largest entry is real and positive, then keeps
/// the real part, normalized.
fn real_coordinates(y: &DVector<Complex64>) -> DVector<f64> {
    let pivot = y
        .iter()
        .copied()
        .fold(Complex64::new(0.0, 0.0), |best, z| if z.norm() > best.norm() { z } else { best });
    let phase = if pivot.norm() > 0.0 {
        pivot.conj() / pivot.norm()
    } else {
        Complex64::new(1.0, 0.0)
    };
    let r = DVector::from_iterator(y.len(), y.iter().map(|z| (z * phase).re));
    let n = r.norm();
    if n > 0.0 {
        r / n
    } else {
        r
    }
}

/// Inverse iteration on `H − θI` for upper Hessenberg `H`, using an `O(m²)`
/// LU with partial pivoting. Vectors of the same cluster are projected out
/// so that repeated Ritz values receive independent vectors.
fn hessenberg_eigvec(
    h: &DMatrix<f64>,
    theta: Complex64,
    cluster: &[&DVector<Complex64>],
) -> Result<DVector<Complex64>> {
    let m = h.nrows();
    // a zero block (null operator) has no scale of its own
    let hnorm = if h.amax() > 0.0 { h.amax() } else { 1.0 };
    let lu = HessenbergLu::factor(h, theta, hnorm);
    let mut x = DVector::from_fn(m, |i, _| Complex64::new(1.0 + (i as f64 * 0.618).fract() * 0.1, 0.0));
    project_out(&mut x, cluster);
    for _ in 0..3 {
        let n = x.norm();
        if !(n > 0.0 && n.is_finite()) {
            return Err(Error::Eigen("inverse iteration lost its iterate".into()));
        }
        x /= Complex64::new(n, 0.0);
        lu.solve(&mut x);
        project_out(&mut x, cluster);
    }
    let n = x.norm();
    if !(n > 0.0 && n.is_finite()) {
        return Err(Error::Eigen("inverse iteration lost its iterate".into()));
    }
    Ok(x / Complex64::new(n, 0.0))
}

fn project_out(x: &mut DVector<Complex64>, cluster: &[&DVector<Complex64>]) {
    for _ in 0..2 {
        for q in cluster {
            let c = q.dotc(x);
            x.axpy(-c, q, Complex64::new(1.0, 0.0));
        }
    }
}

struct HessenbergLu {
    a: DMatrix<Complex64>,
    swaps: Vec<bool>,
    mult: Vec<Complex64>,
}

impl HessenbergLu {
    fn factor(h: &DMatrix<f64>, theta: Complex64, hnorm: f64) -> Self {
        let m = h.nrows();
        let tiny = f64::EPSILON * hnorm;
        let mut a = DMatrix::from_fn(m, m, |i, j| {
            let v = Complex64::new(h[(i, j)], 0.0);
            if i == j {
                v - theta
            } else {
                v
            }
        });
        let mut swaps = vec![false; m.saturating_sub(1)];
        let mut mult = vec![Complex64::new(0.0, 0.0); m.saturating_sub(1)];
        for k in 0..m.saturating_sub(1) {
            if a[(k + 1, k)].norm() > a[(k, k)].norm() {
                a.swap_rows(k, k + 1);
                swaps[k] = true;
            }
            if a[(k, k)].norm() <= tiny {
                a[(k, k)] = Complex64::new(tiny, 0.0);
            }
            let l = a[(k + 1, k)] / a[(k, k)];
            mult[k] = l;
            a[(k + 1, k)] = Complex64::new(0.0, 0.0);
            for j in k + 1..m {
                let akj = a[(k, j)];
                a[(k + 1, j)] -= l * akj;
            }
        }
        if m > 0 && a[(m - 1, m - 1)].norm() <= tiny {
            a[(m - 1, m - 1)] = Complex64::new(tiny, 0.0);
        }
        HessenbergLu { a, swaps, mult }
    }

    fn solve(&self, x: &mut DVector<Complex64>) {
        let m = x.len();
        for k in 0..m.saturating_sub(1) {
            if self.swaps[k] {
                x.swap_rows(k, k + 1);
            }
            let xk = x[k];
            x[k + 1] -= self.mult[k] * xk;
        }
        for i in (0..m).rev() {
            let mut s = x[i];
            for j in i + 1..m {
                s -= self.a[(i, j)] * x[j];
            }
            x[i] = s / self.a[(i, i)];
        }
    }
}

/// Numerical separation rank of a 2-way array: the smallest `r` whose
/// singular-value tail is at most `1e-6` of the Frobenius norm, and `σ₂/σ₁`.
pub fn rank_one_check(mat: &DMatrix<f64>) -> (usize, f64) {
    let sv = accurate_svd(mat.clone()).singular_values;
    let total = sv.norm();
    if total == 0.0 {
        return (0, 0.0);
    }
    let mut tail2 = 0.0;
    let mut r = sv.len();
    while r > 0 && (tail2 + sv[r - 1] * sv[r - 1]).sqrt() <= 1e-6 * total {
        tail2 += sv[r - 1] * sv[r - 1];
        r -= 1;
    }
    let ratio = if sv.len() > 1 { sv[1] / sv[0] } else { 0.0 };
    (r, ratio)
}
