//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Lower Cholesky factor, failing on anything that is not numerically SPD.
pub fn cholesky(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    if !m.is_square() {
        return Err(Error::Shape(format!("{what}: expected a square matrix")));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::NotPositiveDefinite(format!("{what}: non-finite entries")));
    }
    nalgebra::Cholesky::new(symmetrize(m)).map(|c| c.l()).ok_or_else(|| Error::NotPositiveDefinite(what.to_string()))
}

/// `ln det` of an SPD matrix through its Cholesky factor.
pub fn logdet_spd(m: &DMatrix<f64>, what: &str) -> Result<f64> {
    let l = cholesky(m, what)?;
    Ok(2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>())
}

pub fn inverse_spd(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let c = nalgebra::Cholesky::new(symmetrize(m)).ok_or_else(|| Error::NotPositiveDefinite(what.to_string()))?;
    Ok(c.inverse())
}

/// Applies `f` to the eigenvalues of a symmetric matrix.
pub fn sym_apply(m: &DMatrix<f64>, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
    let eig = symmetrize(m).symmetric_eigen();
    let d = DVector::from_iterator(eig.eigenvalues.len(), eig.eigenvalues.iter().map(|&v| f(v)));
    let q = &eig.eigenvectors;
    q * DMatrix::from_diagonal(&d) * q.transpose()
}

/// Principal square root of a symmetric PSD matrix (negative round-off
/// eigenvalues are clamped to zero).
pub fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    symmetrize(&sym_apply(m, |v| v.max(0.0).sqrt()))
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    symmetrize(m).symmetric_eigen().eigenvalues.iter().copied().fold(f64::INFINITY, f64::min)
}

pub(crate) fn check_square(m: &DMatrix<f64>, d: usize, what: &str) -> Result<()> {
    if m.nrows() != d || m.ncols() != d {
        return Err(Error::Shape(format!("{what}: expected {d}x{d}, got {}x{}", m.nrows(), m.ncols())));
    }
    Ok(())
}

pub(crate) fn check_len(v: &[f64], d: usize) -> Result<()> {
    if v.len() != d {
        return Err(Error::DimensionMismatch { expected: d, got: v.len() });
    }
    Ok(())
}
