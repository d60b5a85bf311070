use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{CencovError, Result};

/// A square-root factor `L` with `L L' = cov`, via Cholesky or a clipped eigen split.
pub fn covariance_factor(cov: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !cov.is_square() {
        return Err(CencovError::DimensionMismatch {
            what: "covariance (square)",
            expected: cov.nrows(),
            got: cov.ncols(),
        });
    }
    if let Some(ch) = cov.clone().cholesky() {
        return Ok(ch.l());
    }
    let sym = (cov + cov.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let min = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    if min < -1e-10 {
        return Err(CencovError::InvalidCovariance(min));
    }
    let root = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| v.max(0.0).sqrt()));
    Ok(&eig.eigenvectors * root)
}

/// Draws one vector `mean + L u`.
pub fn mvn_draw<R: Rng>(mean: &DVector<f64>, factor: &DMatrix<f64>, rng: &mut R) -> DVector<f64> {
    let u = DVector::from_fn(mean.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
    mean + factor * u
}

/// `n` draws as rows of an `n x d` matrix.
pub fn mvn_sample(mean: &DVector<f64>, cov: &DMatrix<f64>, n: usize, seed: u64) -> Result<DMatrix<f64>> {
    if cov.nrows() != mean.len() {
        return Err(CencovError::DimensionMismatch {
            what: "covariance rows vs mean",
            expected: mean.len(),
            got: cov.nrows(),
        });
    }
    let factor = covariance_factor(cov)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = DMatrix::zeros(n, mean.len());
    for i in 0..n {
        let d = mvn_draw(mean, &factor, &mut rng);
        out.set_row(i, &d.transpose());
    }
    Ok(out)
}
