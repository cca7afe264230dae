//! Low-rank space-time fields `Y = W1 · W2ᵀ` and their algebra.
//!
//! A field over `n_x` spatial dofs and `n_t` time steps is never formed
//! densely in the solvers; sums concatenate factors and [`LowRankMat::truncate`]
//! recompresses them (thin QR of both factors, SVD of the small core, cut by
//! relative Frobenius tail).

use nalgebra::{DMatrix, DVector, SVD};

use crate::{Error, Result};

/// Singular values below this fraction of the largest are always dropped.
pub const NOISE_FLOOR: f64 = 1e-15;

const CANONICAL_TOL: f64 = 1e-13;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruncationPolicy {
    pub eps0: f64,
    pub r_max: Option<usize>,
}

impl TruncationPolicy {
    pub fn new(eps0: f64) -> Result<Self> {
        if !(eps0 > 0.0 && eps0 < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "truncation tolerance must lie in (0, 1), got {eps0}"
            )));
        }
        Ok(TruncationPolicy { eps0, r_max: None })
    }

    pub fn with_rank_cap(mut self, r_max: usize) -> Self {
        self.r_max = Some(r_max);
        self
    }
}

impl Default for TruncationPolicy {
    fn default() -> Self {
        TruncationPolicy {
            eps0: 1e-8,
            r_max: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LowRankMat {
    w1: DMatrix<f64>,
    w2: DMatrix<f64>,
}

impl LowRankMat {
    pub fn new(w1: DMatrix<f64>, w2: DMatrix<f64>) -> Result<Self> {
        if w1.ncols() != w2.ncols() {
            return Err(Error::mismatch((w1.nrows(), w1.ncols()), (w2.nrows(), w2.ncols())));
        }
        Ok(LowRankMat { w1, w2 })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        LowRankMat {
            w1: DMatrix::zeros(rows, 0),
            w2: DMatrix::zeros(cols, 0),
        }
    }

    pub fn outer(u: &DVector<f64>, v: &DVector<f64>) -> Self {
        LowRankMat {
            w1: DMatrix::from_column_slice(u.len(), 1, u.as_slice()),
            w2: DMatrix::from_column_slice(v.len(), 1, v.as_slice()),
        }
    }

    pub fn rows(&self) -> usize {
        self.w1.nrows()
    }

    pub fn cols(&self) -> usize {
        self.w2.nrows()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows(), self.cols())
    }

    pub fn rank(&self) -> usize {
        self.w1.ncols()
    }

    pub fn w1(&self) -> &DMatrix<f64> {
        &self.w1
    }

    pub fn w2(&self) -> &DMatrix<f64> {
        &self.w2
    }

    pub fn into_factors(self) -> (DMatrix<f64>, DMatrix<f64>) {
        (self.w1, self.w2)
    }

    /// Column `k` of the represented matrix (time slice `k` of a space-time field).
    pub fn column(&self, k: usize) -> DVector<f64> {
        if self.rank() == 0 {
            return DVector::zeros(self.rows());
        }
        &self.w1 * self.w2.row(k).transpose()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        if self.rank() == 0 {
            return DMatrix::zeros(self.rows(), self.cols());
        }
        &self.w1 * self.w2.transpose()
    }

    pub fn from_dense(x: &DMatrix<f64>, pol: &TruncationPolicy) -> Self {
        let (m, n) = x.shape();
        if m == 0 || n == 0 || x.iter().all(|&v| v == 0.0) {
            return Self::zeros(m, n);
        }
        let svd = accurate_svd(x.clone());
        let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
        let r = select_rank(svd.singular_values.as_slice(), pol, 0.0);
        let w1 = u.columns(0, r).into_owned();
        let mut w2 = vt.rows(0, r).transpose();
        for (c, s) in svd.singular_values.iter().take(r).enumerate() {
            w2.column_mut(c).scale_mut(*s);
        }
        LowRankMat { w1, w2 }.canonical_signs()
    }

    /// Best approximation within `eps0 · ‖A‖_F`, returned in canonical form:
    /// orthonormal `W1`, `W2` = orthonormal columns times nonincreasing
    /// singular values, and the largest-magnitude entry of each `W1` column positive.
    pub fn truncate(&self, pol: &TruncationPolicy) -> Self {
        let (m, n) = self.shape();
        if self.rank() == 0 || m == 0 || n == 0 {
            return Self::zeros(m, n);
        }
        if let Some(sv) = self.canonical_spectrum() {
            // already canonical: cutting columns is the exact answer
            let r = select_rank(&sv, pol, 0.0);
            let out = LowRankMat {
                w1: self.w1.columns(0, r).into_owned(),
                w2: self.w2.columns(0, r).into_owned(),
            };
            return out.canonical_signs();
        }
        let qr1 = self.w1.clone().qr();
        let qr2 = self.w2.clone().qr();
        let (q1, r1) = (qr1.q(), qr1.r());
        let (q2, r2) = (qr2.q(), qr2.r());
        let core = &r1 * r2.transpose();
        let svd = accurate_svd(core);
        let sv = svd.singular_values.as_slice();
        let r = select_rank(sv, pol, self.term_scale());
        if r == 0 {
            return Self::zeros(m, n);
        }
        let u = svd.u.unwrap();
        let vt = svd.v_t.unwrap();
        let w1 = q1 * u.columns(0, r);
        let mut w2 = q2 * vt.rows(0, r).transpose();
        for (c, s) in sv.iter().take(r).enumerate() {
            w2.column_mut(c).scale_mut(*s);
        }
        LowRankMat { w1, w2 }.canonical_signs()
    }

    /// `Σ ‖W1[:, i]‖·‖W2[:, i]‖`, the magnitude at which the rounding of a
    /// sum of rank-one terms lives.
    fn term_scale(&self) -> f64 {
        self.w1
            .column_iter()
            .zip(self.w2.column_iter())
            .map(|(a, b)| a.norm() * b.norm())
            .sum()
    }

    /// Singular values if the factors are already in canonical form.
    fn canonical_spectrum(&self) -> Option<Vec<f64>> {
        let r = self.rank();
        let g1 = self.w1.transpose() * &self.w1;
        if (g1 - DMatrix::identity(r, r)).amax() > CANONICAL_TOL {
            return None;
        }
        let g2 = self.w2.transpose() * &self.w2;
        let sv: Vec<f64> = (0..r).map(|i| g2[(i, i)].sqrt()).collect();
        for i in 0..r {
            if sv[i] == 0.0 || (i > 0 && sv[i] > sv[i - 1]) {
                return None;
            }
            for j in 0..i {
                if g2[(i, j)].abs() > CANONICAL_TOL * sv[i] * sv[j] {
                    return None;
                }
            }
        }
        Some(sv)
    }

    fn canonical_signs(mut self) -> Self {
        for c in 0..self.rank() {
            let col = self.w1.column(c);
            let pivot = col.iter().copied().fold(0.0f64, |best, v| {
                if v.abs() > best.abs() {
                    v
                } else {
                    best
                }
            });
            if pivot < 0.0 {
                self.w1.column_mut(c).neg_mut();
                self.w2.column_mut(c).neg_mut();
            }
        }
        self
    }

    /// Exact sum by factor concatenation; the caller truncates.
    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check_shape(other)?;
        Ok(LowRankMat {
            w1: hcat(&self.w1, &other.w1),
            w2: hcat(&self.w2, &other.w2),
        })
    }

    /// `self + alpha · other`, truncated.
    pub fn add_scaled(&self, alpha: f64, other: &Self, pol: &TruncationPolicy) -> Result<Self> {
        Ok(self.add(&other.scale(alpha))?.truncate(pol))
    }

    pub fn scale(&self, c: f64) -> Self {
        if c == 0.0 {
            return Self::zeros(self.rows(), self.cols());
        }
        LowRankMat {
            w1: self.w1.clone(),
            w2: &self.w2 * c,
        }
    }

    /// `⟨vec A, vec B⟩` in `O((n_x + n_t) r_A r_B)`.
    pub fn dot(&self, other: &Self) -> Result<f64> {
        self.check_shape(other)?;
        if self.rank() == 0 || other.rank() == 0 {
            return Ok(0.0);
        }
        let g1 = self.w1.transpose() * &other.w1;
        let g2 = self.w2.transpose() * &other.w2;
        Ok(g1.component_mul(&g2).sum())
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).map(|d| d.max(0.0).sqrt()).unwrap_or(0.0)
    }

    /// Zeroes the spatial rows where `keep` is false.
    pub fn mask_rows(&self, keep: &[bool]) -> Result<Self> {
        if keep.len() != self.rows() {
            return Err(Error::mismatch((self.rows(), 1), (keep.len(), 1)));
        }
        let mut w1 = self.w1.clone();
        for (i, &k) in keep.iter().enumerate() {
            if !k {
                w1.row_mut(i).fill(0.0);
            }
        }
        Ok(LowRankMat {
            w1,
            w2: self.w2.clone(),
        })
    }

    /// Left-multiplies the spatial factor.
    pub fn map_spatial<F>(&self, f: F) -> Self
    where
        F: FnOnce(&DMatrix<f64>) -> DMatrix<f64>,
    {
        LowRankMat {
            w1: f(&self.w1),
            w2: self.w2.clone(),
        }
    }

    fn check_shape(&self, other: &Self) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::mismatch(self.shape(), other.shape()));
        }
        Ok(())
    }
}

/// Thin SVD by one-sided Jacobi rotations, singular values descending.
/// The library bidiagonal SVD either stops early (absolute error near
/// `1e-10·σ₁`) or, with a tight tolerance, can return wrong values on
/// nearly rank-deficient input; Jacobi is accurate to a few ulps.
pub(crate) fn accurate_svd(a: DMatrix<f64>) -> SVD<f64, nalgebra::Dyn, nalgebra::Dyn> {
    let (m, n) = a.shape();
    if m < n {
        let t = accurate_svd(a.transpose());
        return SVD {
            u: t.v_t.map(|vt| vt.transpose()),
            v_t: t.u.map(|u| u.transpose()),
            singular_values: t.singular_values,
        };
    }
    let mut u = a;
    let mut v = DMatrix::<f64>::identity(n, n);
    let tol = f64::EPSILON * (m as f64).sqrt();
    for _ in 0..100 {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let (alpha, beta, gamma) = {
                    let (cp, cq) = (u.column(p), u.column(q));
                    (cp.norm_squared(), cq.norm_squared(), cp.dot(&cq))
                };
                if gamma == 0.0 || gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + zeta.hypot(1.0));
                let c = 1.0 / t.hypot(1.0);
                let s = c * t;
                rotate(&mut u, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }
    let norms: Vec<f64> = u.column_iter().map(|c| c.norm()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]));
    let mut uu = DMatrix::zeros(m, n);
    let mut vt = DMatrix::zeros(n, n);
    for (k, &i) in order.iter().enumerate() {
        if norms[i] > 0.0 {
            uu.set_column(k, &(u.column(i) / norms[i]));
        }
        vt.set_row(k, &v.column(i).transpose());
    }
    SVD {
        u: Some(uu),
        v_t: Some(vt),
        singular_values: DVector::from_iterator(n, order.iter().map(|&i| norms[i])),
    }
}

fn rotate(a: &mut DMatrix<f64>, p: usize, q: usize, c: f64, s: f64) {
    let rows = a.nrows();
    let data = a.as_mut_slice();
    let (lo, hi) = data.split_at_mut(q * rows);
    let cp = &mut lo[p * rows..(p + 1) * rows];
    let cq = &mut hi[..rows];
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (a, b) = (*x, *y);
        *x = c * a - s * b;
        *y = s * a + c * b;
    }
}

pub(crate) fn hcat(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    debug_assert_eq!(a.nrows(), b.nrows());
    let mut out = DMatrix::zeros(a.nrows(), a.ncols() + b.ncols());
    out.columns_mut(0, a.ncols()).copy_from(a);
    out.columns_mut(a.ncols(), b.ncols()).copy_from(b);
    out
}

/// Smallest rank whose discarded tail is within `eps0` of the total
/// Frobenius mass, after the noise floor and the optional cap. Values at
/// the rounding level of `term_scale` are cancellation residue and dropped.
fn select_rank(sv: &[f64], pol: &TruncationPolicy, term_scale: f64) -> usize {
    let s1 = sv.first().copied().unwrap_or(0.0);
    if !(s1 > 8.0 * f64::EPSILON * term_scale) {
        return 0;
    }
    let floor = (NOISE_FLOOR * s1).max(8.0 * f64::EPSILON * term_scale);
    let kept = sv.iter().take_while(|&&s| s > floor).count();
    let total: f64 = sv.iter().map(|s| s * s).sum();
    let budget = pol.eps0 * pol.eps0 * total;
    let mut tail = sv[kept..].iter().map(|s| s * s).sum::<f64>();
    let mut r = kept;
    while r > 0 && tail + sv[r - 1] * sv[r - 1] <= budget {
        tail += sv[r - 1] * sv[r - 1];
        r -= 1;
    }
    match pol.r_max {
        Some(cap) => r.min(cap),
        None => r,
    }
}

/// Vector-space operations shared by dense spatial vectors and low-rank
/// space-time fields, so the Krylov solvers are written once.
pub trait KrylovVector: Clone {
    fn dot(&self, other: &Self) -> f64;

    fn norm(&self) -> f64 {
        self.dot(self).max(0.0).sqrt()
    }

    fn scale(&self, c: f64) -> Self;

    /// `self + alpha · x`, recompressed according to `pol` where applicable.
    fn axpy(&self, alpha: f64, x: &Self, pol: &TruncationPolicy) -> Self;

    /// `self + alpha · x` without recompression.
    fn axpy_exact(&self, alpha: f64, x: &Self) -> Self;

    fn compress(&self, pol: &TruncationPolicy) -> Self;

    fn zeros_like(&self) -> Self;

    /// Representation rank, `None` for dense storage.
    fn rank(&self) -> Option<usize>;
}

impl KrylovVector for DVector<f64> {
    fn dot(&self, other: &Self) -> f64 {
        nalgebra::Matrix::dot(self, other)
    }

    fn norm(&self) -> f64 {
        nalgebra::Matrix::norm(self)
    }

    fn scale(&self, c: f64) -> Self {
        self * c
    }

    fn axpy(&self, alpha: f64, x: &Self, _pol: &TruncationPolicy) -> Self {
        let mut out = self.clone();
        nalgebra::Matrix::axpy(&mut out, alpha, x, 1.0);
        out
    }

    fn axpy_exact(&self, alpha: f64, x: &Self) -> Self {
        KrylovVector::axpy(self, alpha, x, &TruncationPolicy::default())
    }

    fn compress(&self, _pol: &TruncationPolicy) -> Self {
        self.clone()
    }

    fn zeros_like(&self) -> Self {
        DVector::zeros(self.len())
    }

    fn rank(&self) -> Option<usize> {
        None
    }
}

impl KrylovVector for LowRankMat {
    fn dot(&self, other: &Self) -> f64 {
        LowRankMat::dot(self, other).expect("low-rank fields of different shapes")
    }

    fn scale(&self, c: f64) -> Self {
        LowRankMat::scale(self, c)
    }

    fn axpy(&self, alpha: f64, x: &Self, pol: &TruncationPolicy) -> Self {
        self.add_scaled(alpha, x, pol)
            .expect("low-rank fields of different shapes")
    }

    fn axpy_exact(&self, alpha: f64, x: &Self) -> Self {
        self.add(&x.scale(alpha))
            .expect("low-rank fields of different shapes")
    }

    fn compress(&self, pol: &TruncationPolicy) -> Self {
        self.truncate(pol)
    }

    fn zeros_like(&self) -> Self {
        LowRankMat::zeros(self.rows(), self.cols())
    }

    fn rank(&self) -> Option<usize> {
        Some(LowRankMat::rank(self))
    }
}

/// Two passes of modified Gram-Schmidt of `w` against an orthonormal
/// `basis`, recompressing once per pass. Returns the remainder and the
/// accumulated projection coefficients.
pub fn orthogonalize<V: KrylovVector>(
    w: V,
    basis: &[V],
    pol: &TruncationPolicy,
) -> (V, Vec<f64>) {
    let mut coeffs = vec![0.0; basis.len()];
    let mut w = w;
    for _ in 0..2 {
        for (c, v) in coeffs.iter_mut().zip(basis) {
            let p = w.dot(v);
            *c += p;
            w = w.axpy_exact(-p, v);
        }
        w = w.compress(pol);
    }
    (w, coeffs)
}
