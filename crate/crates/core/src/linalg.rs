//! Symmetric positive-definite helpers on top of nalgebra's Cholesky.
//!
//! Strict routines report failure; [`SpdFactor::with_retry`] is the single
//! place where a small jitter may be added, and only once.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

pub fn cholesky(a: &DMatrix<f64>, what: &str) -> Result<Cholesky<f64, Dyn>> {
    if a.iter().any(|x| !x.is_finite()) {
        return Err(Error::NotPositiveDefinite(format!("{what} (non-finite entries)")));
    }
    Cholesky::new(a.clone()).ok_or_else(|| Error::NotPositiveDefinite(what.to_string()))
}

pub fn logdet_spd(a: &DMatrix<f64>, what: &str) -> Result<f64> {
    Ok(logdet_of(&cholesky(a, what)?))
}

fn logdet_of(chol: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * chol.l_dirty().diagonal().iter().map(|x| x.ln()).sum::<f64>()
}

pub fn inverse_spd(a: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    Ok(symmetrize(&cholesky(a, what)?.inverse()))
}

/// Factorization of a precision matrix, with its inverse and log-determinant.
#[derive(Debug, Clone)]
pub struct SpdFactor {
    pub matrix: DMatrix<f64>,
    pub inverse: DMatrix<f64>,
    pub logdet: f64,
    chol: Cholesky<f64, Dyn>,
}

impl SpdFactor {
    pub fn new(a: &DMatrix<f64>, what: &str) -> Result<Self> {
        let chol = cholesky(a, what)?;
        Ok(Self::from_chol(a.clone(), chol))
    }

    /// Symmetrizes `a`, factors it, and on failure retries once with
    /// `1e-10 · tr(a)/n` added to the diagonal.
    pub fn with_retry(a: &DMatrix<f64>, what: &str) -> Result<Self> {
        let sym = symmetrize(a);
        if let Ok(chol) = cholesky(&sym, what) {
            return Ok(Self::from_chol(sym, chol));
        }
        let n = sym.nrows().max(1) as f64;
        let jitter = 1e-10 * (sym.trace().abs() / n).max(f64::MIN_POSITIVE);
        let mut jittered = sym;
        for i in 0..jittered.nrows() {
            jittered[(i, i)] += jitter;
        }
        let chol = cholesky(&jittered, what)?;
        Ok(Self::from_chol(jittered, chol))
    }

    fn from_chol(matrix: DMatrix<f64>, chol: Cholesky<f64, Dyn>) -> Self {
        let inverse = symmetrize(&chol.inverse());
        let logdet = logdet_of(&chol);
        SpdFactor {
            matrix,
            inverse,
            logdet,
            chol,
        }
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(b)
    }

    /// Lower-triangular factor `L` with `matrix = L Lᵀ`.
    pub fn lower(&self) -> DMatrix<f64> {
        self.chol.l()
    }
}

/// `tr(A B)` without forming the product.
pub fn trace_of_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    debug_assert_eq!(a.ncols(), b.nrows());
    debug_assert_eq!(a.nrows(), b.ncols());
    let mut acc = 0.0;
    for i in 0..a.nrows() {
        for k in 0..a.ncols() {
            acc += a[(i, k)] * b[(k, i)];
        }
    }
    acc
}

/// `A + jitter·I` with `jitter = rel · tr(A)/n`.
pub fn add_relative_jitter(a: &DMatrix<f64>, rel: f64) -> DMatrix<f64> {
    let n = a.nrows().max(1) as f64;
    let jitter = rel * a.trace().abs() / n;
    let mut out = a.clone();
    for i in 0..out.nrows() {
        out[(i, i)] += jitter;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn logdet_and_inverse() {
        let a = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let ld = logdet_spd(&a, "a").unwrap();
        assert!((ld - 11f64.ln()).abs() < 1e-14);
        let inv = inverse_spd(&a, "a").unwrap();
        let prod = &a * &inv;
        assert!((prod - DMatrix::identity(2, 2)).amax() < 1e-14);
    }

    #[test]
    fn indefinite_is_reported() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(logdet_spd(&a, "a"), Err(Error::NotPositiveDefinite(_))));
        assert!(SpdFactor::with_retry(&a, "a").is_err());
    }

    #[test]
    fn retry_rescues_semidefinite_boundary() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let f = SpdFactor::with_retry(&a, "a").unwrap();
        assert!(f.matrix[(0, 0)] > 1.0);
    }

    #[test]
    fn trace_product_matches() {
        let a = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = DMatrix::from_row_slice(3, 2, &[1.0, 0.5, -1.0, 2.0, 0.0, 1.0]);
        assert!((trace_of_product(&a, &b) - (&a * &b).trace()).abs() < 1e-14);
    }
}
