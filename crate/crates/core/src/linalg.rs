//! Small dense helpers shared by the filter, the samplers and the scheduler.

use nalgebra::{DMatrix, DVector, Dim, Matrix4, OMatrix, DefaultAllocator, allocator::Allocator};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Eigenvalues below this (relative to the largest magnitude) are treated as
/// rounding noise when deciding positive semidefiniteness.
pub const PSD_TOLERANCE: f64 = 1e-9;

pub fn symmetrize<D: Dim>(m: &OMatrix<f64, D, D>) -> OMatrix<f64, D, D>
where
    DefaultAllocator: Allocator<D, D>,
{
    (m + m.transpose()) * 0.5
}

/// Symmetrizes and clamps negative eigenvalues to zero.
pub fn project_psd(m: &Matrix4<f64>) -> Matrix4<f64> {
    let sym = symmetrize(m);
    let eig = sym.symmetric_eigen();
    if eig.eigenvalues.iter().all(|&l| l >= 0.0) {
        return sym;
    }
    let clamped = eig.eigenvalues.map(|l| l.max(0.0));
    let out = &eig.eigenvectors * Matrix4::from_diagonal(&clamped) * eig.eigenvectors.transpose();
    symmetrize(&out)
}

/// Checks symmetry and a non-negative spectrum for a dynamically sized matrix.
pub fn check_psd(m: &DMatrix<f64>, what: &str) -> Result<()> {
    if !m.is_square() {
        return Err(Error::Config(format!("{what}: covariance must be square")));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::Config(format!("{what}: covariance has non-finite entries")));
    }
    let scale = m.amax().max(1.0);
    if (m - m.transpose()).amax() > PSD_TOLERANCE * scale {
        return Err(Error::Config(format!("{what}: covariance is not symmetric")));
    }
    let eig = m.clone().symmetric_eigen();
    let min = eig.eigenvalues.min();
    if min < -PSD_TOLERANCE * scale {
        return Err(Error::Config(format!(
            "{what}: covariance has negative eigenvalue {min:.3e}"
        )));
    }
    Ok(())
}

/// Returns `L` with `L Lᵀ = m` for a PSD matrix, via the eigendecomposition so
/// that singular covariances are accepted.
pub fn psd_factor(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    check_psd(m, what)?;
    let eig = symmetrize(m).symmetric_eigen();
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&roots))
}

/// Draws `factor · z` with `z` standard normal, one draw per row of `factor`.
pub fn gaussian_draw<R: Rng + ?Sized>(factor: &DMatrix<f64>, rng: &mut R) -> DVector<f64> {
    let z = DVector::from_fn(factor.ncols(), |_, _| rng.sample::<f64, _>(StandardNormal));
    factor * z
}

/// 2-norm condition number from the singular values; infinite when singular.
pub fn condition_number(m: &DMatrix<f64>) -> f64 {
    let sv = m.clone().singular_values();
    let max = sv.max();
    let min = sv.min();
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}
