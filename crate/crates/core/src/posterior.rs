//! Low-rank posterior covariance through the Sherman–Morrison–Woodbury
//! update of the prior-preconditioned misfit Hessian.

use nalgebra::{DMatrix, DVector};

use crate::arnoldi::{ArnoldiResult, RitzPair};
use crate::{Error, Result};

/// Default threshold on retained eigenvalues.
pub const DEFAULT_EPS_EIG: f64 = 1e-1;

/// Directions whose norm drops below this fraction during
/// re-orthonormalization are treated as already covered and dropped.
const DROP_REL: f64 = 1e-8;

/// `λ/(λ+1)`; negative input means an indefinite Hessian upstream.
pub fn lambda_tilde(lam: f64) -> Result<f64> {
    if lam < 0.0 || lam.is_nan() {
        return Err(Error::NegativeEigenvalue(lam));
    }
    if lam.is_infinite() {
        return Ok(1.0);
    }
    Ok(lam / (lam + 1.0))
}

#[derive(Debug, Clone)]
pub struct PosteriorSummary {
    eigenvalues: Vec<f64>,
    filter: DVector<f64>,
    basis: DMatrix<f64>,
    gamma_prior: f64,
    variance: DVector<f64>,
}

impl PosteriorSummary {
    /// Builds the summary from eigenpairs `(λ_i, v_i)`; the vectors are
    /// re-orthonormalized and pairs are ordered by descending `λ`.
    pub fn from_pairs(pairs: &[(f64, DVector<f64>)], n_x: usize, gamma_prior: f64) -> Result<Self> {
        if !(gamma_prior > 0.0 && gamma_prior.is_finite()) {
            return Err(Error::InvalidConfig(format!("gamma_prior must be positive, got {gamma_prior}")));
        }
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        order.sort_by(|&a, &b| pairs[b].0.total_cmp(&pairs[a].0));
        let mut eigenvalues = Vec::with_capacity(pairs.len());
        let mut cols: Vec<DVector<f64>> = Vec::with_capacity(pairs.len());
        for &i in &order {
            let (lam, v) = &pairs[i];
            if v.len() != n_x {
                return Err(Error::mismatch((n_x, 1), (v.len(), 1)));
            }
            lambda_tilde(*lam)?;
            let n0 = v.norm();
            if !(n0 > 0.0) {
                continue;
            }
            let mut w = v / n0;
            for _ in 0..2 {
                for q in &cols {
                    let c = q.dot(&w);
                    w.axpy(-c, q, 1.0);
                }
            }
            let left = w.norm();
            if left <= DROP_REL {
                continue;
            }
            cols.push(w / left);
            eigenvalues.push(*lam);
        }
        let basis = if cols.is_empty() {
            DMatrix::zeros(n_x, 0)
        } else {
            DMatrix::from_columns(&cols)
        };
        let filter = DVector::from_iterator(
            eigenvalues.len(),
            eigenvalues.iter().map(|&l| lambda_tilde(l).expect("checked above")),
        );
        let variance = diagonal(&basis, &filter, gamma_prior);
        Ok(PosteriorSummary {
            eigenvalues,
            filter,
            basis,
            gamma_prior,
            variance,
        })
    }

    /// Keeps the Ritz pairs with real part at least `eps_eig`.
    pub fn from_ritz(pairs: &[RitzPair<DVector<f64>>], n_x: usize, gamma_prior: f64, eps_eig: f64) -> Result<Self> {
        let kept: Vec<(f64, DVector<f64>)> = pairs
            .iter()
            .filter(|p| p.value.re >= eps_eig)
            .map(|p| (p.value.re, p.vector.clone()))
            .collect();
        Self::from_pairs(&kept, n_x, gamma_prior)
    }

    pub fn from_arnoldi(res: &ArnoldiResult<DVector<f64>>, gamma_prior: f64, eps_eig: f64) -> Result<Self> {
        let n_x = res.basis().first().map_or(0, |v| v.len());
        Self::from_ritz(res.ritz(), n_x, gamma_prior, eps_eig)
    }

    pub fn n_x(&self) -> usize {
        self.basis.nrows()
    }

    pub fn retained(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    /// `λ̃_i = λ_i/(λ_i+1)`.
    pub fn filter(&self) -> &DVector<f64> {
        &self.filter
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    pub fn gamma_prior(&self) -> f64 {
        self.gamma_prior
    }

    /// Diagonal of the approximate posterior covariance.
    pub fn variance(&self) -> &DVector<f64> {
        &self.variance
    }

    pub fn apply(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        posterior_apply(v, self)
    }
}

fn diagonal(basis: &DMatrix<f64>, filter: &DVector<f64>, gamma: f64) -> DVector<f64> {
    DVector::from_fn(basis.nrows(), |i, _| {
        let reduction: f64 = basis.row(i).iter().zip(filter.iter()).map(|(v, f)| f * v * v).sum();
        gamma * (1.0 - reduction)
    })
}

/// `γ(1 − Σ λ̃_i v_i²)` entrywise for the given eigenpairs.
pub fn variance_diag(pairs: &[(f64, DVector<f64>)], n_x: usize, gamma_prior: f64) -> Result<DVector<f64>> {
    Ok(PosteriorSummary::from_pairs(pairs, n_x, gamma_prior)?.variance)
}

/// `γ(v − V(λ̃ ∘ Vᵀv))`.
pub fn posterior_apply(v: &DVector<f64>, s: &PosteriorSummary) -> Result<DVector<f64>> {
    if v.len() != s.n_x() {
        return Err(Error::mismatch((s.n_x(), 1), (v.len(), 1)));
    }
    let coeffs = s.basis.tr_mul(v).component_mul(&s.filter);
    Ok((v - &s.basis * coeffs) * s.gamma_prior)
}
