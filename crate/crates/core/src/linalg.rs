//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Result, SpldaError};

pub type Chol = Cholesky<f64, Dyn>;

/// Relative diagonal jitter added once when a Cholesky factorization fails.
pub const JITTER: f64 = 1e-10;

/// Replaces `m` by `(m + mᵀ) / 2`; the result is exactly symmetric.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

pub fn symmetrized(mut m: DMatrix<f64>) -> DMatrix<f64> {
    symmetrize(&mut m);
    m
}

/// Cholesky factorization with a single jitter retry of `1e-10·tr(A)/n·I`.
pub fn cholesky(a: &DMatrix<f64>, what: &'static str) -> Result<Chol> {
    if a.iter().any(|v| !v.is_finite()) {
        return Err(SpldaError::NotPositiveDefinite { what });
    }
    if let Some(c) = Cholesky::new(a.clone()) {
        return Ok(c);
    }
    let n = a.nrows().max(1);
    let jitter = JITTER * a.trace().abs() / n as f64;
    let mut b = a.clone();
    for i in 0..a.nrows() {
        b[(i, i)] += jitter;
    }
    Cholesky::new(b).ok_or(SpldaError::NotPositiveDefinite { what })
}

/// `ln|A|` from the Cholesky diagonal.
pub fn ln_det(chol: &Chol) -> f64 {
    let l = chol.l_dirty();
    (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>() * 2.0
}

/// Inverse of a symmetric positive definite matrix, symmetrized.
pub fn spd_inverse(a: &DMatrix<f64>, what: &'static str) -> Result<DMatrix<f64>> {
    let c = cholesky(a, what)?;
    Ok(symmetrized(c.inverse()))
}

/// Ratio of extreme absolute eigenvalues of a symmetric matrix.
pub fn condition_estimate(a: &DMatrix<f64>) -> f64 {
    let ev = symmetrized(a.clone()).symmetric_eigenvalues();
    let (mut lo, mut hi) = (f64::INFINITY, 0.0_f64);
    for v in ev.iter() {
        lo = lo.min(v.abs());
        hi = hi.max(v.abs());
    }
    if lo == 0.0 {
        f64::INFINITY
    } else {
        hi / lo
    }
}

pub fn outer(a: &DVector<f64>, b: &DVector<f64>) -> DMatrix<f64> {
    a * b.transpose()
}

/// Lower-triangular Cholesky factor as a plain matrix.
pub fn lower_factor(a: &DMatrix<f64>, what: &'static str) -> Result<DMatrix<f64>> {
    Ok(cholesky(a, what)?.l())
}

pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

/// Row `j` of `m` as a column vector.
pub fn row_vec(m: &DMatrix<f64>, j: usize) -> DVector<f64> {
    m.row(j).transpose()
}

/// Augments `y` to `[y; 1]`.
pub fn augment(y: &DVector<f64>) -> DVector<f64> {
    let n = y.len();
    let mut out = DVector::zeros(n + 1);
    out.rows_mut(0, n).copy_from(y);
    out[n] = 1.0;
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jitter_rescues_semidefinite() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let c = cholesky(&a, "a").unwrap();
        assert!(ln_det(&c).is_finite());
    }

    #[test]
    fn indefinite_is_rejected() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(matches!(
            cholesky(&a, "a"),
            Err(SpldaError::NotPositiveDefinite { .. })
        ));
    }

    #[test]
    fn ln_det_matches_determinant() {
        let a = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0]);
        let c = cholesky(&a, "a").unwrap();
        assert!((ln_det(&c) - a.determinant().ln()).abs() < 1e-12);
    }
}
