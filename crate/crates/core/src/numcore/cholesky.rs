use serde::{Deserialize, Serialize};

use super::Matrix;
use crate::error::{Error, Result};

/// Diagonal jitter levels tried, in order, before giving up on a factorization.
pub const JITTER_LADDER: [f64; 4] = [0.0, 1e-8, 1e-6, 1e-4];

const SYMMETRY_TOL: f64 = 1e-10;

/// Lower-triangular Cholesky factor `L` with `L Lᵀ = A + jitter I`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CholeskyFactor {
    lower: Matrix,
    jitter: f64,
}

impl CholeskyFactor {
    pub fn lower(&self) -> &Matrix {
        &self.lower
    }

    pub fn n(&self) -> usize {
        self.lower.rows()
    }

    /// Diagonal jitter that was needed for the factorization to succeed.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    /// `log |A|` as `2 Σ log L_ii`.
    pub fn log_det(&self) -> f64 {
        2.0 * (0..self.n()).map(|i| self.lower.get(i, i).ln()).sum::<f64>()
    }

    /// `L Lᵀ`.
    pub fn reconstruct(&self) -> Matrix {
        let mut out = Matrix::zeros(self.n(), self.n());
        super::matrix::gemm(false, &self.lower, true, &self.lower, &mut out, 0.0);
        out
    }

    /// Solves `L x = b` in place for each column of `b`.
    pub fn solve_lower_in_place(&self, b: &mut Matrix) {
        let k = b.cols();
        let l = &self.lower;
        let data = b.as_mut_slice();
        for i in 0..self.n() {
            let (done, rest) = data.split_at_mut(i * k);
            let row = &mut rest[..k];
            for (j, &lij) in l.row(i)[..i].iter().enumerate() {
                if lij != 0.0 {
                    for (r, x) in row.iter_mut().zip(&done[j * k..(j + 1) * k]) {
                        *r -= lij * x;
                    }
                }
            }
            let lii = l.get(i, i);
            row.iter_mut().for_each(|r| *r /= lii);
        }
    }

    /// Solves `Lᵀ x = b` in place for each column of `b`.
    pub fn solve_upper_in_place(&self, b: &mut Matrix) {
        let n = self.n();
        let k = b.cols();
        let l = &self.lower;
        let data = b.as_mut_slice();
        for i in (0..n).rev() {
            let (head, solved) = data.split_at_mut((i + 1) * k);
            let row = &mut head[i * k..];
            for j in i + 1..n {
                let lji = l.get(j, i);
                if lji != 0.0 {
                    let off = (j - i - 1) * k;
                    for (r, x) in row.iter_mut().zip(&solved[off..off + k]) {
                        *r -= lji * x;
                    }
                }
            }
            let lii = l.get(i, i);
            row.iter_mut().for_each(|r| *r /= lii);
        }
    }

    /// `A⁻¹ = L⁻ᵀ L⁻¹`.
    pub fn inverse(&self) -> Matrix {
        let n = self.n();
        let mut linv = Matrix::zeros(n, n);
        let l = &self.lower;
        let data = linv.as_mut_slice();
        for i in 0..n {
            let (done, rest) = data.split_at_mut(i * n);
            let row = &mut rest[..=i];
            row[i] = 1.0;
            for (j, &lij) in l.row(i)[..i].iter().enumerate() {
                if lij != 0.0 {
                    for (r, x) in row.iter_mut().zip(&done[j * n..=j * n + j]) {
                        *r -= lij * x;
                    }
                }
            }
            let lii = l.get(i, i);
            row.iter_mut().for_each(|r| *r /= lii);
        }
        let mut inv = Matrix::zeros(n, n);
        super::matrix::gemm(true, &linv, false, &linv, &mut inv, 0.0);
        for i in 0..n {
            for j in 0..i {
                let v = 0.5 * (inv.get(i, j) + inv.get(j, i));
                inv.set(i, j, v);
                inv.set(j, i, v);
            }
        }
        inv
    }
}

/// Factors a symmetric positive-definite matrix, escalating diagonal jitter
/// through [`JITTER_LADDER`] when a pivot is non-positive.
pub fn cholesky(m: &Matrix) -> Result<CholeskyFactor> {
    let n = m.rows();
    if n == 0 || m.cols() != n {
        return Err(Error::DimensionMismatch(format!(
            "cholesky of a {}x{} matrix",
            m.rows(),
            m.cols()
        )));
    }
    m.ensure_finite("cholesky input")?;
    if !m.is_symmetric(SYMMETRY_TOL * (1.0 + max_abs(m))) {
        return Err(Error::DimensionMismatch("cholesky input is not symmetric".into()));
    }
    let mut last_pivot = 0;
    for &jitter in &JITTER_LADDER {
        match factor_with_jitter(m, jitter) {
            Ok(lower) => return Ok(CholeskyFactor { lower, jitter }),
            Err(pivot) => last_pivot = pivot,
        }
    }
    Err(Error::NotPositiveDefinite {
        pivot: last_pivot,
        jitter: JITTER_LADDER[JITTER_LADDER.len() - 1],
    })
}

fn max_abs(m: &Matrix) -> f64 {
    m.as_slice().iter().fold(0.0, |a, &v| a.max(v.abs()))
}

fn factor_with_jitter(m: &Matrix, jitter: f64) -> std::result::Result<Matrix, usize> {
    let n = m.rows();
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let lj = l.row(j)[..j].to_vec();
        let d = m.get(j, j) + jitter - lj.iter().map(|v| v * v).sum::<f64>();
        if !(d > 0.0) {
            return Err(j);
        }
        let djj = d.sqrt();
        l.set(j, j, djj);
        for i in j + 1..n {
            let li = &l.row(i)[..j];
            let dot: f64 = li.iter().zip(&lj).map(|(a, b)| a * b).sum();
            let v = (m.get(i, j) - dot) / djj;
            l.set(i, j, v);
        }
    }
    Ok(l)
}

/// Solves `A X = B` given the factor of `A`.
pub fn solve_spd(f: &CholeskyFactor, b: &Matrix) -> Result<Matrix> {
    if b.rows() != f.n() {
        return Err(Error::DimensionMismatch(format!(
            "solve against {}x{} factor with {} rhs rows",
            f.n(),
            f.n(),
            b.rows()
        )));
    }
    let mut x = b.clone();
    f.solve_lower_in_place(&mut x);
    f.solve_upper_in_place(&mut x);
    Ok(x)
}
