//! Small dense linear-algebra helpers on top of nalgebra.
//!
//! Everything here works on symmetric matrices of modest size (at most a few
//! hundred columns), so plain Cholesky / symmetric eigendecompositions are
//! used throughout. Helpers return structured errors naming the matrix that
//! failed so callers can surface useful diagnostics.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// Forces exact symmetry by averaging with the transpose.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    let nr = m.nrows();
    debug_assert_eq!(nr, m.ncols());
    for i in 0..nr {
        for j in (i + 1)..nr {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Largest absolute asymmetry |m_ij - m_ji|.
pub fn asymmetry(m: &DMatrix<f64>) -> f64 {
    let mut worst = 0.0_f64;
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

/// Cholesky factorization with a named error on failure.
pub fn cholesky(m: &DMatrix<f64>, what: &str) -> Result<Cholesky<f64, Dyn>> {
    Cholesky::new(m.clone()).ok_or_else(|| Error::NotPositiveDefinite {
        what: what.to_string(),
        detail: format!(
            "Cholesky failed on a {}x{} matrix (min diagonal {:.3e})",
            m.nrows(),
            m.ncols(),
            min_diagonal(m)
        ),
    })
}

fn min_diagonal(m: &DMatrix<f64>) -> f64 {
    (0..m.nrows().min(m.ncols()))
        .map(|i| m[(i, i)])
        .fold(f64::INFINITY, f64::min)
}

/// Inverse of a symmetric positive definite matrix via Cholesky.
pub fn spd_inverse(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let mut inv = cholesky(m, what)?.inverse();
    symmetrize(&mut inv);
    Ok(inv)
}

/// Solves m x = b for symmetric positive definite m.
pub fn spd_solve(m: &DMatrix<f64>, b: &DVector<f64>, what: &str) -> Result<DVector<f64>> {
    Ok(cholesky(m, what)?.solve(b))
}

/// Log-determinant of a symmetric positive definite matrix.
pub fn spd_log_det(m: &DMatrix<f64>, what: &str) -> Result<f64> {
    let chol = cholesky(m, what)?;
    Ok(2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>())
}

/// Symmetric square root of a positive semidefinite matrix.
///
/// Eigenvalues below `-tol * max_eig` are rejected; small negative values in
/// `[-tol * max_eig, 0]` are clamped to zero.
pub fn sym_sqrt(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let mut sym = m.clone();
    symmetrize(&mut sym);
    let eig = sym.symmetric_eigen();
    let max_eig = eig.eigenvalues.iter().cloned().fold(0.0_f64, f64::max);
    let tol = 1e-12 * max_eig.max(1.0);
    let mut roots = eig.eigenvalues.clone();
    for (i, v) in roots.iter_mut().enumerate() {
        if *v < -tol {
            return Err(Error::NotPositiveDefinite {
                what: what.to_string(),
                detail: format!("eigenvalue {i} = {v:.3e} is negative"),
            });
        }
        *v = v.max(0.0).sqrt();
    }
    let mut out = &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose();
    symmetrize(&mut out);
    Ok(out)
}

/// Extreme eigenvalues (min, max) of a symmetric matrix.
pub fn sym_eig_range(m: &DMatrix<f64>) -> (f64, f64) {
    let mut sym = m.clone();
    symmetrize(&mut sym);
    let eig = sym.symmetric_eigen();
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = eig
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    (min, max)
}

/// Largest eigenvalue of a symmetric matrix.
pub fn sym_max_eig(m: &DMatrix<f64>) -> f64 {
    sym_eig_range(m).1
}

/// Copies the rows and columns of `m` indexed by `rows` and `cols`.
pub fn block(m: &DMatrix<f64>, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |i, j| m[(rows[i], cols[j])])
}

/// Copies the entries of `v` indexed by `idx`.
pub fn gather(v: &DVector<f64>, idx: &[usize]) -> DVector<f64> {
    DVector::from_fn(idx.len(), |i, _| v[idx[i]])
}

/// Writes the entries of `sub` into `v` at positions `idx`.
pub fn scatter(v: &mut DVector<f64>, idx: &[usize], sub: &DVector<f64>) {
    debug_assert_eq!(idx.len(), sub.len());
    for (k, &i) in idx.iter().enumerate() {
        v[i] = sub[k];
    }
}

/// Max-norm of a vector; 0 for an empty vector.
pub fn max_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0_f64, |acc, x| acc.max(x.abs()))
}

/// Max absolute entry of a matrix; 0 for an empty matrix.
pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0_f64, |acc, x| acc.max(x.abs()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn sym_sqrt_squares_back() {
        let m = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0]);
        let r = sym_sqrt(&m, "m").unwrap();
        let back = &r * &r;
        assert_relative_eq!(back, m, epsilon = 1e-12);
    }

    #[test]
    fn spd_inverse_round_trip() {
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.5]);
        let inv = spd_inverse(&m, "m").unwrap();
        let id = &m * &inv;
        assert_relative_eq!(id, DMatrix::identity(2, 2), epsilon = 1e-12);
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(cholesky(&m, "m").is_err());
    }

    #[test]
    fn block_and_gather_pick_entries() {
        let m = DMatrix::from_row_slice(3, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]);
        let b = block(&m, &[0, 2], &[1]);
        assert_eq!(b, DMatrix::from_row_slice(2, 1, &[2.0, 8.0]));
        let v = DVector::from_row_slice(&[10.0, 20.0, 30.0]);
        assert_eq!(gather(&v, &[2, 0]), DVector::from_row_slice(&[30.0, 10.0]));
    }
}
