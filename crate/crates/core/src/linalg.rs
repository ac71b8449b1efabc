//! Small dense linear-algebra helpers shared by the Laplace fits and priors.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{EigError, Result};

/// Largest jitter tried by [`cholesky_with_jitter`] before giving up.
const MAX_JITTER: f64 = 1e8;

/// `true` when `m` is square and symmetric within `rel_tol` of its largest entry.
pub fn is_symmetric(m: &DMatrix<f64>, rel_tol: f64) -> bool {
    if m.nrows() != m.ncols() {
        return false;
    }
    let scale = m.amax().max(f64::MIN_POSITIVE);
    for i in 0..m.nrows() {
        for j in 0..i {
            if (m[(i, j)] - m[(j, i)]).abs() > rel_tol * scale {
                return false;
            }
        }
    }
    true
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Symmetrizes `m` and factors it, adding `lambda * I` with `lambda` doubling
/// from 1e-10 until the factorization succeeds. Returns the symmetrized (and
/// possibly jittered) matrix, its factor, and the jitter used.
pub fn cholesky_with_jitter(
    m: &DMatrix<f64>,
    what: &'static str,
) -> Result<(DMatrix<f64>, Cholesky<f64, Dyn>, f64)> {
    let sym = symmetrize(m);
    if sym.iter().any(|v| !v.is_finite()) {
        return Err(EigError::NotPositiveDefinite { what });
    }
    if let Some(chol) = sym.clone().cholesky() {
        return Ok((sym, chol, 0.0));
    }
    let n = sym.nrows();
    let mut lambda = 1e-10;
    while lambda <= MAX_JITTER {
        let jittered = &sym + DMatrix::<f64>::identity(n, n) * lambda;
        if let Some(chol) = jittered.clone().cholesky() {
            return Ok((jittered, chol, lambda));
        }
        lambda *= 2.0;
    }
    Err(EigError::NotPositiveDefinite { what })
}

/// log det of the matrix factored by `chol`.
pub fn log_det(chol: &Cholesky<f64, Dyn>) -> f64 {
    chol.l_dirty().diagonal().iter().map(|d| 2.0 * d.ln()).sum()
}

/// Solves `L x = b` for the lower factor of `chol`.
pub fn solve_lower(chol: &Cholesky<f64, Dyn>, b: &DVector<f64>) -> DVector<f64> {
    // The triangular solvers only read the lower triangle.
    chol.l_dirty()
        .solve_lower_triangular(b)
        .expect("Cholesky factor has a non-zero diagonal")
}

/// Solves `Lᵀ x = b` for the lower factor of `chol`.
pub fn solve_upper_transpose(chol: &Cholesky<f64, Dyn>, b: &DVector<f64>) -> DVector<f64> {
    chol.l_dirty()
        .tr_solve_lower_triangular(b)
        .expect("Cholesky factor has a non-zero diagonal")
}

/// Relative Frobenius distance `‖a − b‖ / ‖b‖`.
pub fn frobenius_rel(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let denom = b.norm().max(f64::MIN_POSITIVE);
    (a - b).norm() / denom
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jitter_repairs_semidefinite() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let (fixed, chol, lambda) = cholesky_with_jitter(&m, "test").unwrap();
        assert!(lambda > 0.0 && lambda < 1e-6);
        assert!((fixed[(0, 0)] - 1.0 - lambda).abs() < 1e-15);
        assert!(log_det(&chol).is_finite());
    }

    #[test]
    fn no_jitter_for_pd() {
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let (_, chol, lambda) = cholesky_with_jitter(&m, "test").unwrap();
        assert_eq!(lambda, 0.0);
        assert!((log_det(&chol) - (1.75f64).ln()).abs() < 1e-14);
    }

    #[test]
    fn rejects_negative_definite() {
        let m = DMatrix::from_row_slice(1, 1, &[-1e12]);
        assert!(cholesky_with_jitter(&m, "neg").is_err());
    }

    #[test]
    fn empty_matrix_factors() {
        let m = DMatrix::<f64>::zeros(0, 0);
        let (_, chol, lambda) = cholesky_with_jitter(&m, "empty").unwrap();
        assert_eq!(lambda, 0.0);
        assert_eq!(log_det(&chol), 0.0);
    }

    #[test]
    fn triangular_solves_roundtrip() {
        let m = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let chol = m.clone().cholesky().unwrap();
        let b = DVector::from_vec(vec![1.0, 2.0]);
        let w = solve_lower(&chol, &b);
        let x = solve_upper_transpose(&chol, &w);
        assert!((&m * x - b).norm() < 1e-14);
    }
}
