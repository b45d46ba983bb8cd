//! Small dense helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

pub fn asymmetry(m: &DMatrix<f64>) -> f64 {
    max_abs(&(m - m.transpose()))
}

/// Largest eigenvalue magnitude, via the real Schur form.
pub fn spectral_radius(a: &DMatrix<f64>) -> f64 {
    if a.nrows() == 0 {
        return 0.0;
    }
    a.complex_eigenvalues()
        .iter()
        .fold(0.0_f64, |acc, z| acc.max(z.norm()))
}

pub fn symmetric_eigenvalues(m: &DMatrix<f64>) -> DVector<f64> {
    symmetrize(m).symmetric_eigen().eigenvalues
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    symmetric_eigenvalues(m).min()
}

pub fn max_eigenvalue(m: &DMatrix<f64>) -> f64 {
    symmetric_eigenvalues(m).max()
}

pub fn check_square(m: &DMatrix<f64>, what: &str) -> Result<usize> {
    if m.nrows() != m.ncols() {
        return Err(Error::Dimension(format!(
            "{what} must be square, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    Ok(m.nrows())
}

/// Symmetric to `sym_tol` (relative to the largest entry) with every eigenvalue > 0.
pub fn check_spd(m: &DMatrix<f64>, what: &str, sym_tol: f64) -> Result<()> {
    check_square(m, what)?;
    let scale = max_abs(m).max(1.0);
    if asymmetry(m) > sym_tol * scale {
        return Err(Error::NotPositiveDefinite(format!("{what} is not symmetric")));
    }
    let lmin = min_eigenvalue(m);
    if !(lmin > 0.0) {
        return Err(Error::NotPositiveDefinite(format!(
            "{what} has smallest eigenvalue {lmin:e}"
        )));
    }
    Ok(())
}

pub fn quad_form(p: &DMatrix<f64>, x: &DVector<f64>) -> f64 {
    x.dot(&(p * x))
}

/// Replace eigenvalues below `floor` (relative to the spectral scale) so the result is
/// positive definite. Used to turn an indefinite Hessian into a descent metric.
pub fn positive_definite_part(h: &DMatrix<f64>, rel_floor: f64) -> DMatrix<f64> {
    let eig = symmetrize(h).symmetric_eigen();
    let scale = eig.eigenvalues.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
    let floor = (rel_floor * scale).max(1e-12);
    let clamped = eig.eigenvalues.map(|v| v.abs().max(floor));
    &eig.eigenvectors * DMatrix::from_diagonal(&clamped) * eig.eigenvectors.transpose()
}

/// Dense Kronecker product.
pub fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    a.kronecker(b)
}

/// Column-stacking vec operator.
pub fn vec(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(m.as_slice())
}

pub fn unvec(v: &DVector<f64>, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_column_slice(rows, cols, v.as_slice())
}
