//! Small dense linear-algebra helpers shared by the samplers.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

const JITTER_LADDER: [f64; 5] = [1e-10, 1e-9, 1e-8, 1e-7, 1e-6];

/// Replaces `m` with `(m + mᵀ) / 2`.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}

/// Cholesky factorization, escalating a diagonal jitter from 1e-10 to 1e-6
/// before giving up.
pub fn cholesky_jittered(m: &DMatrix<f64>, context: &str) -> Result<Cholesky<f64, Dyn>> {
    if let Some(c) = Cholesky::new(m.clone()) {
        return Ok(c);
    }
    let n = m.nrows();
    for jitter in JITTER_LADDER {
        let shifted = m + DMatrix::<f64>::identity(n, n) * jitter;
        if let Some(c) = Cholesky::new(shifted) {
            return Ok(c);
        }
    }
    Err(Error::NotPositiveDefinite(context.to_string()))
}

/// Draws `mean + L z` with `z ~ N(0, I)` where `L` is the Cholesky factor.
pub fn sample_mvn<R: Rng + ?Sized>(
    mean: &DVector<f64>,
    chol: &Cholesky<f64, Dyn>,
    rng: &mut R,
) -> DVector<f64> {
    let z = DVector::from_fn(mean.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
    mean + chol.l() * z
}

/// Inverse of a symmetric positive-definite matrix, symmetrized.
pub fn spd_inverse(m: &DMatrix<f64>, context: &str) -> Result<DMatrix<f64>> {
    let mut inv = cholesky_jittered(m, context)?.inverse();
    symmetrize(&mut inv);
    Ok(inv)
}

/// Log-determinant from a Cholesky factor.
pub fn chol_log_det(chol: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * chol
        .l_dirty()
        .diagonal()
        .iter()
        .map(|d| d.ln())
        .sum::<f64>()
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    m.clone()
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jitter_rescues_semidefinite() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(Cholesky::new(m.clone()).is_none());
        assert!(cholesky_jittered(&m, "test").is_ok());
    }

    #[test]
    fn indefinite_fails() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(matches!(
            cholesky_jittered(&m, "neg"),
            Err(Error::NotPositiveDefinite(_))
        ));
    }

    #[test]
    fn log_det_matches_product_of_eigenvalues() {
        let m = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let c = cholesky_jittered(&m, "t").unwrap();
        assert!((chol_log_det(&c) - 11.0f64.ln()).abs() < 1e-12);
    }
}
