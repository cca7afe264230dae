//! Banded LU factorization without pivoting.
//!
//! Every matrix factorized here (implicit-Euler step matrices, the FD
//! Laplacian) is strictly diagonally dominant or SPD with lexicographic
//! bandwidth `n_side`, so elimination in natural order is stable. One
//! factorization serves both `A x = b` and `Aᵀ x = b`.

use nalgebra::{DMatrix, DVector};
use nalgebra_sparse::CsrMatrix;

use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct BandedLu {
    n: usize,
    lower: usize,
    upper: usize,
    // row-major band: entry (i, j) lives at i * width + (j + lower - i)
    band: Vec<f64>,
}

impl BandedLu {
    pub fn factor(a: &CsrMatrix<f64>) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(Error::mismatch((n, n), (a.nrows(), a.ncols())));
        }
        let (mut lower, mut upper) = (0usize, 0usize);
        for (i, j, _) in a.triplet_iter() {
            if j < i {
                lower = lower.max(i - j);
            } else {
                upper = upper.max(j - i);
            }
        }
        let width = lower + upper + 1;
        let mut lu = BandedLu {
            n,
            lower,
            upper,
            band: vec![0.0; n * width],
        };
        let mut scale = 0.0f64;
        for (i, j, &v) in a.triplet_iter() {
            let idx = lu.pos(i, j);
            lu.band[idx] += v;
            scale = scale.max(v.abs());
        }
        lu.eliminate(scale)?;
        Ok(lu)
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    #[inline]
    fn pos(&self, i: usize, j: usize) -> usize {
        i * (self.lower + self.upper + 1) + (j + self.lower - i)
    }

    fn eliminate(&mut self, scale: f64) -> Result<()> {
        let tiny = f64::EPSILON * scale.max(f64::MIN_POSITIVE);
        for k in 0..self.n {
            let pivot = self.band[self.pos(k, k)];
            if !(pivot.abs() > tiny) {
                return Err(Error::Factorization(format!(
                    "zero pivot {pivot:.3e} at row {k}"
                )));
            }
            let last_row = (k + self.lower).min(self.n - 1);
            let last_col = (k + self.upper).min(self.n - 1);
            for i in k + 1..=last_row {
                let ik = self.pos(i, k);
                let l = self.band[ik] / pivot;
                if l == 0.0 {
                    continue;
                }
                self.band[ik] = l;
                for j in k + 1..=last_col {
                    let kj = self.band[self.pos(k, j)];
                    let ij = self.pos(i, j);
                    self.band[ij] -= l * kj;
                }
            }
        }
        Ok(())
    }

    pub fn solve_in_place(&self, x: &mut [f64]) {
        assert_eq!(x.len(), self.n);
        for i in 0..self.n {
            let mut s = x[i];
            for j in i.saturating_sub(self.lower)..i {
                s -= self.band[self.pos(i, j)] * x[j];
            }
            x[i] = s;
        }
        for i in (0..self.n).rev() {
            let mut s = x[i];
            for j in i + 1..=(i + self.upper).min(self.n - 1) {
                s -= self.band[self.pos(i, j)] * x[j];
            }
            x[i] = s / self.band[self.pos(i, i)];
        }
    }

    /// Solves `Aᵀ x = b` as `Uᵀ z = b`, then `Lᵀ x = z`.
    pub fn solve_transpose_in_place(&self, x: &mut [f64]) {
        assert_eq!(x.len(), self.n);
        for i in 0..self.n {
            let mut s = x[i];
            for j in i.saturating_sub(self.upper)..i {
                s -= self.band[self.pos(j, i)] * x[j];
            }
            x[i] = s / self.band[self.pos(i, i)];
        }
        for i in (0..self.n).rev() {
            let mut s = x[i];
            for j in i + 1..=(i + self.lower).min(self.n - 1) {
                s -= self.band[self.pos(j, i)] * x[j];
            }
            x[i] = s;
        }
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut x = b.clone();
        self.solve_in_place(x.as_mut_slice());
        x
    }

    pub fn solve_transpose(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut x = b.clone();
        self.solve_transpose_in_place(x.as_mut_slice());
        x
    }

    /// Column-by-column solve of a multi-right-hand-side block.
    pub fn solve_matrix(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut x = b.clone();
        for mut col in x.column_iter_mut() {
            self.solve_in_place(col.as_mut_slice());
        }
        x
    }

    pub fn solve_transpose_matrix(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut x = b.clone();
        for mut col in x.column_iter_mut() {
            self.solve_transpose_in_place(col.as_mut_slice());
        }
        x
    }
}
