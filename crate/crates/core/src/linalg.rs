//! Small dense-matrix helpers shared across the crate.

use nalgebra::{Cholesky, DMatrix, Dyn};

use crate::error::{Error, Result};

/// Frobenius inner product sum_ij a_ij * b_ij.
pub fn frob_dot(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    debug_assert_eq!(a.shape(), b.shape());
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// Replaces `m` with (m + m^T) / 2.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    debug_assert_eq!(n, m.ncols());
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Largest absolute asymmetry |m_ij - m_ji| relative to the largest absolute
/// entry (1.0 floor keeps the measure meaningful for near-zero matrices).
pub fn max_relative_asymmetry(m: &DMatrix<f64>) -> f64 {
    let scale = m.iter().fold(0.0f64, |acc, v| acc.max(v.abs())).max(1.0);
    let mut worst = 0.0f64;
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst / scale
}

/// Cholesky factorisation, mapping failure to a domain error.
pub fn cholesky(m: &DMatrix<f64>, context: &str) -> Result<Cholesky<f64, Dyn>> {
    Cholesky::new(m.clone()).ok_or_else(|| Error::NotPositiveDefinite {
        context: context.to_string(),
    })
}

/// log det of an SPD matrix given its Cholesky factor.
pub fn logdet_from_cholesky(chol: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn symmetrize_averages_off_diagonal_pairs() {
        let mut m = DMatrix::from_row_slice(2, 2, &[1.0, 3.0, 1.0, 2.0]);
        symmetrize(&mut m);
        assert_eq!(m[(0, 1)], 2.0);
        assert_eq!(m[(1, 0)], 2.0);
        assert_eq!(m[(0, 0)], 1.0);
    }

    #[test]
    fn logdet_matches_direct_determinant() {
        let m = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let chol = cholesky(&m, "test").unwrap();
        let expect = (4.0f64 * 3.0 - 1.0).ln();
        assert!((logdet_from_cholesky(&chol) - expect).abs() < 1e-12);
    }

    #[test]
    fn cholesky_rejects_indefinite_input() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(
            cholesky(&m, "test"),
            Err(Error::NotPositiveDefinite { .. })
        ));
    }
}
