//! Small dense linear-algebra helpers shared across the crate.

use nalgebra::{DMatrix, DVector};

use crate::error::{DfmError, Result};

/// `(M + M^T) / 2`. Covariance recursions drift asymmetric under round-off;
/// every stored covariance goes through this.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    0.5 * (m + m.transpose())
}

/// Largest singular value.
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    m.clone()
        .singular_values()
        .iter()
        .fold(0.0, |a, &s| a.max(s))
}

/// Column-major vectorisation `vec(M)`.
pub fn vec_mat(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(m.as_slice())
}

/// Inverse of `vec_mat`.
pub fn unvec(v: &DVector<f64>, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_column_slice(rows, cols, v.as_slice())
}

/// Solves the discrete Lyapunov equation `P = A P A^T + Q` by vectorisation:
/// `vec(P) = (I - A (x) A)^{-1} vec(Q)`.
pub fn solve_discrete_lyapunov(a: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let m = a.nrows();
    if a.ncols() != m || q.nrows() != m || q.ncols() != m {
        return Err(DfmError::Invalid(
            "lyapunov: A and Q must be square with matching dimension".into(),
        ));
    }
    let lhs = DMatrix::identity(m * m, m * m) - a.kronecker(a);
    let sol = lhs
        .lu()
        .solve(&vec_mat(q))
        .ok_or_else(|| DfmError::Numerical("lyapunov: I - A (x) A is singular".into()))?;
    let p = unvec(&sol, m, m);
    if p.iter().any(|v| !v.is_finite()) {
        return Err(DfmError::Numerical("lyapunov: non-finite solution".into()));
    }
    Ok(symmetrize(&p))
}

/// Projects a symmetric matrix onto the cone of matrices with eigenvalues
/// at least `floor`.
pub fn floor_eigenvalues(m: &DMatrix<f64>, floor: f64) -> DMatrix<f64> {
    let sym = symmetrize(m);
    let eig = sym.symmetric_eigen();
    let mut vals = eig.eigenvalues;
    for v in vals.iter_mut() {
        if *v < floor {
            *v = floor;
        }
    }
    let rebuilt = &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose();
    symmetrize(&rebuilt)
}

/// Log-determinant of a symmetric positive definite matrix via Cholesky.
pub fn log_det_spd(m: &DMatrix<f64>) -> Option<f64> {
    let chol = m.clone().cholesky()?;
    Some(2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>())
}

/// Moore-Penrose pseudo-inverse. Singular values below
/// `rel_tol * sigma_max` are dropped.
pub fn pinv(m: &DMatrix<f64>, rel_tol: f64) -> DMatrix<f64> {
    let svd = m.clone().svd(true, true);
    let smax = svd.singular_values.iter().fold(0.0_f64, |a, &s| a.max(s));
    let cut = rel_tol * smax;
    let u = svd.u.expect("svd with u");
    let vt = svd.v_t.expect("svd with v_t");
    let mut sinv = DMatrix::zeros(vt.nrows(), u.ncols());
    for (i, &s) in svd.singular_values.iter().enumerate() {
        if s > cut {
            sinv[(i, i)] = 1.0 / s;
        }
    }
    vt.transpose() * sinv * u.transpose()
}

/// Largest absolute entry difference between two equally sized matrices.
pub fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape(), "max_abs_diff: shape mismatch");
    a.iter()
        .zip(b.iter())
        .fold(0.0_f64, |acc, (x, y)| acc.max((x - y).abs()))
}

/// Max-norm difference scaled by `max(1, |a|, |b|)`; the crate's notion of
/// relative agreement between state-space outputs.
pub fn rel_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let scale = a
        .iter()
        .chain(b.iter())
        .fold(1.0_f64, |acc, v| acc.max(v.abs()));
    max_abs_diff(a, b) / scale
}
