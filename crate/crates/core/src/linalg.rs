//! Small dense symmetric linear algebra used throughout the crate.
//!
//! Everything here works on `nalgebra` dynamic matrices; the state dimensions
//! involved are tiny, so the routines favour robustness over speed.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Residual allowed in `A - Aᵀ` before a matrix is rejected as non-symmetric.
pub const SYMMETRY_TOL: f64 = 1e-10;

pub fn ensure_square(m: &DMatrix<f64>, what: &str) -> Result<()> {
    if m.nrows() != m.ncols() {
        return Err(Error::Matrix(format!(
            "{what} must be square, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    Ok(())
}

pub fn ensure_symmetric(m: &DMatrix<f64>, what: &str) -> Result<()> {
    ensure_square(m, what)?;
    let scale = m.amax().max(1.0);
    let asym = (m - m.transpose()).amax();
    if asym > SYMMETRY_TOL * scale {
        return Err(Error::Matrix(format!(
            "{what} is not symmetric (max |A - Aᵀ| = {asym:e})"
        )));
    }
    Ok(())
}

fn symmetrized(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Eigenvalues of a symmetric matrix in ascending order.
pub fn sym_eigenvalues(m: &DMatrix<f64>) -> Result<Vec<f64>> {
    ensure_symmetric(m, "matrix")?;
    if m.nrows() == 0 {
        return Ok(Vec::new());
    }
    let mut ev: Vec<f64> = symmetrized(m).symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    Ok(ev)
}

pub fn lambda_min(m: &DMatrix<f64>) -> Result<f64> {
    sym_eigenvalues(m)?
        .first()
        .copied()
        .ok_or_else(|| Error::Matrix("empty matrix has no eigenvalues".into()))
}

pub fn lambda_max(m: &DMatrix<f64>) -> Result<f64> {
    sym_eigenvalues(m)?
        .last()
        .copied()
        .ok_or_else(|| Error::Matrix("empty matrix has no eigenvalues".into()))
}

pub fn is_positive_definite(m: &DMatrix<f64>) -> bool {
    ensure_symmetric(m, "matrix").is_ok()
        && m.nrows() > 0
        && symmetrized(m).cholesky().is_some()
        && lambda_min(m).map(|l| l > 0.0).unwrap_or(false)
}

pub fn is_positive_semidefinite(m: &DMatrix<f64>) -> bool {
    match lambda_min(m) {
        Ok(l) => l >= -SYMMETRY_TOL * m.amax().max(1.0),
        Err(_) => false,
    }
}

/// Largest generalized eigenvalue `λ_max(A, B)`: the largest `λ` with
/// `det(A - λB) = 0`, i.e. the largest eigenvalue of `B⁻¹A`.
///
/// Computed by the symmetric reduction `C = L⁻¹ A L⁻ᵀ` with `B = LLᵀ`.
pub fn generalized_eig_max(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    let ev = generalized_eigenvalues(a, b)?;
    ev.last()
        .copied()
        .ok_or_else(|| Error::Matrix("empty matrix has no eigenvalues".into()))
}

/// All generalized eigenvalues of the pencil `(A, B)`, ascending.
pub fn generalized_eigenvalues(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<Vec<f64>> {
    ensure_symmetric(a, "A")?;
    ensure_symmetric(b, "B")?;
    if a.shape() != b.shape() {
        return Err(Error::Matrix(format!(
            "A is {}x{} but B is {}x{}",
            a.nrows(),
            a.ncols(),
            b.nrows(),
            b.ncols()
        )));
    }
    let chol = symmetrized(b)
        .cholesky()
        .ok_or_else(|| Error::Matrix("B is not positive definite".into()))?;
    let l = chol.l();
    let l_inv = l
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Matrix("Cholesky factor of B is singular".into()))?;
    let c = &l_inv * symmetrized(a) * l_inv.transpose();
    sym_eigenvalues(&symmetrized(&c))
}

/// Principal square root of a symmetric positive-semidefinite matrix.
/// Eigenvalues below zero (round-off) are clamped to zero.
pub fn sym_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    ensure_symmetric(m, "matrix")?;
    if m.nrows() == 0 {
        return Ok(m.clone());
    }
    let eig = symmetrized(m).symmetric_eigen();
    let sqrt_vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    let v = &eig.eigenvectors;
    Ok(v * DMatrix::from_diagonal(&sqrt_vals) * v.transpose())
}

/// `xᵀ A x`.
pub fn quad_form(a: &DMatrix<f64>, x: &DVector<f64>) -> f64 {
    (x.transpose() * a * x)[(0, 0)]
}

pub fn matrix_from_rows(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    let nrows = rows.len();
    let ncols = rows.first().map(Vec::len).unwrap_or(0);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Config(format!("{what}: ragged matrix rows")));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}
