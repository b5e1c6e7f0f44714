//! Dense linear-algebra helpers for covariance handling and Gaussian KL.
//!
//! Covariances flow through every update in this crate, so the PSD
//! manipulations live here: Cholesky factorization with a PSD fallback,
//! eigenvalue flooring, SPD inversion, and the closed-form KL divergence
//! between multivariate Gaussians.

use alloc::format;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
// Resolves float math in no_std builds; test builds link std and shadow it.
#[allow(unused_imports)]
use num_traits::Float;

use crate::error::{Error, Result};

/// Relative tolerance below which a negative eigenvalue is treated as
/// round-off rather than genuine indefiniteness.
const PSD_TOLERANCE: f64 = 1e-9;

/// Checks that a dimension matches, reporting `what` on failure.
pub(crate) fn check_dim(what: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            what,
            expected,
            actual,
        })
    }
}

/// Returns `(m + m^T) / 2`.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Draws a vector of independent standard-normal values from `rng`.
pub fn standard_normal_vector<R: rand::Rng + ?Sized>(rng: &mut R, dim: usize) -> DVector<f64> {
    DVector::from_fn(dim, |_, _| rng.sample(rand_distr::StandardNormal))
}

/// Cholesky factorization of a strictly positive definite matrix.
///
/// Fails on indefinite or semidefinite input; use [`factor_psd`] where a
/// semidefinite matrix (for example a deliberately degenerate covariance)
/// must be accepted.
pub fn cholesky_spd(m: &DMatrix<f64>, what: &'static str) -> Result<Cholesky<f64, Dyn>> {
    Cholesky::new(m.clone()).ok_or(Error::NotPositiveDefinite { what })
}

/// A factor `L` with `L L^T = m` for a positive *semi*definite matrix.
///
/// Strictly PD input uses the Cholesky factor. Semidefinite input falls back
/// to the symmetric eigendecomposition square root, with eigenvalues inside
/// the round-off band clamped to zero. Input with a genuinely negative
/// eigenvalue is rejected; nothing is repaired silently.
pub fn factor_psd(m: &DMatrix<f64>, what: &'static str) -> Result<DMatrix<f64>> {
    if let Some(chol) = Cholesky::new(m.clone()) {
        return Ok(chol.unpack());
    }
    let eig = SymmetricEigen::new(symmetrize(m));
    let scale = eig.eigenvalues.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
    let tol = PSD_TOLERANCE * scale.max(1.0);
    if eig.eigenvalues.iter().any(|&v| v < -tol) {
        return Err(Error::NotPositiveDefinite { what });
    }
    let sqrt = DVector::from_iterator(
        eig.eigenvalues.len(),
        eig.eigenvalues.iter().map(|&v| v.max(0.0).sqrt()),
    );
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&sqrt) * eig.eigenvectors.transpose())
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_symmetric_eigenvalue(m: &DMatrix<f64>) -> f64 {
    let eig = SymmetricEigen::new(symmetrize(m));
    eig.eigenvalues.iter().fold(f64::INFINITY, |a, &v| a.min(v))
}

/// Clamps the eigenvalues of a symmetric matrix to at least `floor`.
///
/// Returns an SPD matrix whose smallest eigenvalue is `>= floor`.
pub fn floor_spd(m: &DMatrix<f64>, floor: f64) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(symmetrize(m));
    let clamped = DVector::from_iterator(
        eig.eigenvalues.len(),
        eig.eigenvalues.iter().map(|&v| v.max(floor)),
    );
    let rebuilt = &eig.eigenvectors * DMatrix::from_diagonal(&clamped) * eig.eigenvectors.transpose();
    symmetrize(&rebuilt)
}

/// Inverse of an SPD matrix via its Cholesky factorization.
pub fn inverse_spd(m: &DMatrix<f64>, what: &'static str) -> Result<DMatrix<f64>> {
    Ok(cholesky_spd(m, what)?.inverse())
}

/// `log det` of an SPD matrix via its Cholesky factorization.
pub fn log_det_spd(m: &DMatrix<f64>, what: &'static str) -> Result<f64> {
    let l = cholesky_spd(m, what)?.unpack();
    Ok(2.0 * l.diagonal().iter().map(|&d| d.ln()).sum::<f64>())
}

/// Closed-form KL divergence `KL(N(mean_p, cov_p) || N(mean_q, cov_q))`.
pub fn gaussian_kl(
    mean_p: &DVector<f64>,
    cov_p: &DMatrix<f64>,
    mean_q: &DVector<f64>,
    cov_q: &DMatrix<f64>,
) -> Result<f64> {
    let dim = mean_p.len();
    check_dim("gaussian_kl mean_q", dim, mean_q.len())?;
    check_dim("gaussian_kl cov_p rows", dim, cov_p.nrows())?;
    check_dim("gaussian_kl cov_q rows", dim, cov_q.nrows())?;
    let chol_q = cholesky_spd(cov_q, "gaussian_kl cov_q")?;
    let log_det_q = 2.0
        * chol_q
            .l_dirty()
            .diagonal()
            .iter()
            .map(|&d| d.ln())
            .sum::<f64>();
    let log_det_p = log_det_spd(cov_p, "gaussian_kl cov_p")?;
    let trace = chol_q.solve(cov_p).trace();
    let diff = mean_q - mean_p;
    let maha = diff.dot(&chol_q.solve(&DMatrix::from_column_slice(dim, 1, diff.as_slice())));
    let kl = 0.5 * (trace + maha - dim as f64 + log_det_q - log_det_p);
    if !kl.is_finite() {
        return Err(Error::InvalidParameter {
            name: "gaussian_kl",
            reason: format!("non-finite divergence {kl}"),
        });
    }
    Ok(kl)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn random_spd(dim: usize, seed: u64) -> DMatrix<f64> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let a = DMatrix::from_fn(dim, dim, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal));
        &a * a.transpose() + DMatrix::identity(dim, dim) * 0.5
    }

    #[test]
    fn factor_psd_round_trips_pd_matrices() {
        for seed in 0..20 {
            let c = random_spd(3, seed);
            let l = factor_psd(&c, "test").unwrap();
            let rebuilt = &l * l.transpose();
            let err = (&rebuilt - &c).norm() / c.norm();
            assert!(err < 1e-10, "relative error {err}");
        }
    }

    #[test]
    fn factor_psd_accepts_zero_matrix() {
        let z = DMatrix::zeros(2, 2);
        let l = factor_psd(&z, "test").unwrap();
        assert_eq!(l, DMatrix::zeros(2, 2));
    }

    #[test]
    fn factor_psd_rejects_indefinite() {
        let m = DMatrix::from_diagonal(&DVector::from_column_slice(&[1.0, -0.5]));
        assert!(factor_psd(&m, "test").is_err());
    }

    #[test]
    fn floor_lifts_small_eigenvalues() {
        let m = DMatrix::from_diagonal(&DVector::from_column_slice(&[2.0, 1e-12]));
        let floored = floor_spd(&m, 1e-6);
        assert!(min_symmetric_eigenvalue(&floored) >= 1e-6 - 1e-12);
        assert_relative_eq!(floored[(0, 0)], 2.0, max_relative = 1e-12);
    }

    #[test]
    fn kl_identical_gaussians_is_zero() {
        let mean = DVector::from_column_slice(&[1.0, -2.0]);
        let cov = random_spd(2, 7);
        let kl = gaussian_kl(&mean, &cov, &mean, &cov).unwrap();
        assert!(kl.abs() < 1e-12);
    }

    #[test]
    fn kl_shared_covariance_closed_form() {
        // means differing by d with shared covariance: KL = 0.5 d^T C^-1 d
        let cov = random_spd(2, 3);
        let mp = DVector::from_column_slice(&[0.3, -0.7]);
        let mq = DVector::from_column_slice(&[-0.2, 0.4]);
        let d = &mq - &mp;
        let expected = 0.5
            * d.dot(&(inverse_spd(&cov, "c").unwrap() * &d));
        let kl = gaussian_kl(&mp, &cov, &mq, &cov).unwrap();
        assert_relative_eq!(kl, expected, max_relative = 1e-10);
    }
}
