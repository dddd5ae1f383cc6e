//! ADMM solver for the L1-penalised loadings update inside the sparse EM
//! iteration.
//!
//! The penalised update splits into a ridge-like primal solve, an
//! elementwise soft-threshold on the auxiliary variable, and a multiplier
//! step. Because the selection matrices are diagonal, the primal system
//! decomposes into one `r x r` solve per variable, so a full update costs
//! `O(r^3 p)` instead of `O(r^3 p^3)`.
//!
//! The first `q` variables are kept inside the primal system but exempt from
//! thresholding, so they are never shrunk to zero.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{DfmError, Result};
use crate::estimators::SmoothedMoments;

/// Fixed augmented-Lagrangian scaling; the split is exact for any positive
/// value, and a constant keeps runs deterministic.
pub const DEFAULT_NU: f64 = 1.0;
/// Iteration cap for one ADMM solve.
pub const MAX_ADMM_ITER: usize = 200;
/// Absolute tolerance of the stopping rule.
pub const EPS_ABS: f64 = 1e-6;
/// Relative tolerance of the stopping rule.
pub const EPS_REL: f64 = 1e-6;

/// Primal/auxiliary/multiplier state of the ADMM split, carried across EM
/// iterations and across the penalty grid as a warm start.
#[derive(Debug, Clone)]
pub struct AdmmState {
    /// Primal loadings (dense up to the consensus residual).
    pub primal: DMatrix<f64>,
    /// Auxiliary loadings; exactly sparse, and what the solver returns.
    pub aux: DMatrix<f64>,
    /// Scaled Lagrange multipliers.
    pub dual: DMatrix<f64>,
    pub nu: f64,
    /// Leading variables exempt from the penalty.
    pub n_unpenalized: usize,
    /// Frobenius norm of `Lambda - Z` per iteration of the last solve.
    pub primal_residuals: Vec<f64>,
    /// `nu * ||Z_k - Z_{k-1}||_F` per iteration of the last solve.
    pub dual_residuals: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Elementwise `sign(m) * max(|m| - t, 0)`; entries at or below the
/// threshold come out exactly zero.
pub fn soft_threshold(m: &DMatrix<f64>, t: f64) -> Result<DMatrix<f64>> {
    if t < 0.0 {
        return Err(DfmError::Invalid("soft threshold must be non-negative".into()));
    }
    Ok(m.map(|v| {
        let shrunk = v.abs() - t;
        if shrunk > 0.0 {
            shrunk * v.signum()
        } else {
            0.0
        }
    }))
}

/// Per-variable normal equations of the loadings update, already scaled by
/// the inverse idiosyncratic variances.
pub(crate) struct RowSystems {
    /// `sigma_i^-2 * sum_{t: i observed} S_{t|n}`, one `r x r` matrix per
    /// variable.
    pub gram: Vec<DMatrix<f64>>,
    /// `sigma_i^-2 * sum_{t: i observed} X_{it} a_{t|n}` (plus any
    /// cross-moment correction), one `r`-vector per variable.
    pub rhs: Vec<DVector<f64>>,
}

impl RowSystems {
    pub fn n_vars(&self) -> usize {
        self.gram.len()
    }

    pub fn n_factors(&self) -> usize {
        self.gram.first().map_or(0, |g| g.nrows())
    }
}

/// Assembles the row systems for IID errors from panel data, mask, smoothed
/// moments, and the previous iteration's idiosyncratic variances.
pub(crate) fn iid_row_systems(
    x: &DMatrix<f64>,
    mask: &DMatrix<bool>,
    moments: &SmoothedMoments,
    sigma_eps: &DVector<f64>,
) -> Result<RowSystems> {
    let (n, p) = x.shape();
    let r = moments.dim();
    if moments.len() != n || mask.shape() != (n, p) || sigma_eps.len() != p {
        return Err(DfmError::Invalid("row systems: dimension mismatch".into()));
    }
    let mut gram = Vec::with_capacity(p);
    let mut rhs = Vec::with_capacity(p);
    for i in 0..p {
        let w = 1.0 / sigma_eps[i];
        let mut g = DMatrix::zeros(r, r);
        let mut b = DVector::zeros(r);
        for t in 0..n {
            if mask[(t, i)] {
                g += &moments.second[t];
                b += moments.means.row(t).transpose() * x[(t, i)];
            }
        }
        gram.push(g * w);
        rhs.push(b * w);
    }
    Ok(RowSystems { gram, rhs })
}

/// One primal update: for each variable `i` solve
/// `(sigma_i^-2 sum_{t:obs} S_{t|n} + nu I) Lambda_i' =
///  sigma_i^-2 sum_{t:obs} X_it a_{t|n} + nu (Z_i - U_i)'`.
pub fn admm_lambda_primal(
    x: &DMatrix<f64>,
    mask: &DMatrix<bool>,
    moments: &SmoothedMoments,
    sigma_eps: &DVector<f64>,
    z: &DMatrix<f64>,
    u: &DMatrix<f64>,
    nu: f64,
) -> Result<DMatrix<f64>> {
    if nu <= 0.0 || nu.is_nan() {
        return Err(DfmError::Invalid("nu must be strictly positive".into()));
    }
    let systems = iid_row_systems(x, mask, moments, sigma_eps)?;
    let factors = factor_rows(&systems, nu)?;
    Ok(primal_step(&systems, &factors, z, u, nu))
}

fn factor_rows(systems: &RowSystems, nu: f64) -> Result<Vec<Cholesky<f64, Dyn>>> {
    let r = systems.n_factors();
    systems
        .gram
        .iter()
        .enumerate()
        .map(|(i, g)| {
            let ridged = g + DMatrix::from_diagonal_element(r, r, nu);
            Cholesky::new(ridged).ok_or_else(|| {
                DfmError::Numerical(format!(
                    "ADMM primal system for variable {i} is not positive definite"
                ))
            })
        })
        .collect()
}

fn primal_step(
    systems: &RowSystems,
    factors: &[Cholesky<f64, Dyn>],
    z: &DMatrix<f64>,
    u: &DMatrix<f64>,
    nu: f64,
) -> DMatrix<f64> {
    let p = systems.n_vars();
    let r = systems.n_factors();
    let mut lambda = DMatrix::zeros(p, r);
    for (i, factor) in factors.iter().enumerate().take(p) {
        let target = &systems.rhs[i] + (z.row(i) - u.row(i)).transpose() * nu;
        let sol = factor.solve(&target);
        lambda.row_mut(i).copy_from(&sol.transpose());
    }
    lambda
}

/// Runs the full ADMM iteration given pre-assembled row systems.
pub(crate) fn admm_solve_rows(
    systems: &RowSystems,
    alpha: f64,
    n_unpenalized: usize,
    warm: Option<AdmmState>,
) -> Result<(DMatrix<f64>, AdmmState)> {
    let p = systems.n_vars();
    let r = systems.n_factors();
    if alpha < 0.0 {
        return Err(DfmError::Invalid("alpha must be non-negative".into()));
    }
    if n_unpenalized > p {
        return Err(DfmError::Invalid("q cannot exceed the number of variables".into()));
    }
    let nu = DEFAULT_NU;
    let (mut z, mut u) = match warm {
        Some(state) if state.aux.shape() == (p, r) => (state.aux, state.dual),
        _ => (DMatrix::zeros(p, r), DMatrix::zeros(p, r)),
    };
    let factors = factor_rows(systems, nu)?;

    let mut primal_residuals = Vec::new();
    let mut dual_residuals = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    let mut lambda = DMatrix::zeros(p, r);
    let size_term = ((p * r) as f64).sqrt() * EPS_ABS;

    for _ in 0..MAX_ADMM_ITER {
        iterations += 1;
        lambda = primal_step(systems, &factors, &z, &u, nu);
        let z_old = z.clone();
        let lam_plus_u = &lambda + &u;
        z = soft_threshold(&lam_plus_u, alpha / nu)?;
        for i in 0..n_unpenalized {
            z.row_mut(i).copy_from(&lam_plus_u.row(i));
        }
        u += &lambda - &z;

        let primal_res = (&lambda - &z).norm();
        let dual_res = nu * (&z - &z_old).norm();
        primal_residuals.push(primal_res);
        dual_residuals.push(dual_res);
        let eps_pri = size_term + EPS_REL * lambda.norm().max(z.norm());
        let eps_dual = size_term + EPS_REL * nu * u.norm();
        if primal_res <= eps_pri && dual_res <= eps_dual {
            converged = true;
            break;
        }
    }

    let state = AdmmState {
        primal: lambda,
        aux: z.clone(),
        dual: u,
        nu,
        n_unpenalized,
        primal_residuals,
        dual_residuals,
        iterations,
        converged,
    };
    // The auxiliary iterate carries the exact zeros.
    Ok((z, state))
}

/// Solves the penalised loadings update for IID errors: iterates the primal
/// solve, the soft-threshold (skipping the first `q` variables), and the
/// multiplier step until the residual criterion or the iteration cap.
pub fn admm_solve(
    x: &DMatrix<f64>,
    mask: &DMatrix<bool>,
    moments: &SmoothedMoments,
    sigma_eps: &DVector<f64>,
    alpha: f64,
    n_unpenalized: usize,
    warm: Option<AdmmState>,
) -> Result<(DMatrix<f64>, AdmmState)> {
    let systems = iid_row_systems(x, mask, moments, sigma_eps)?;
    admm_solve_rows(&systems, alpha, n_unpenalized, warm)
}
