//! Kalman filtering and smoothing for the factor state space, in two
//! algebraically equivalent flavours.
//!
//! [`kalman_multivariate`] runs the classic recursions, treating the whole
//! observation vector at once; missing series are physically deleted from
//! the measurement equation at each step, which keeps the per-time observed
//! count exact for the innovations log-likelihood. When the state dimension
//! is below the observed count, the innovation covariance is inverted through
//! the Woodbury identity and its determinant through the matching
//! triple-product identity.
//!
//! [`kalman_univariate`] processes one observation element at a time
//! (sequential updates, multivariate prediction between times), valid because
//! the measurement covariance is diagonal. Matrix inversions become scalar
//! divisions; the backward pass runs on the cumulant vectors/matrices and the
//! lagged cross-covariance comes from the de Jong identity.
//!
//! Both return the same smoothed moments and log-likelihood up to round-off.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{DfmError, Result};
use crate::linalg::{pinv, symmetrize};

const LN_2PI: f64 = 1.8378770664093453;

/// Minimum relative singular value kept when a predicted covariance has to
/// be pseudo-inverted in the cross-covariance step.
const PINV_REL_TOL: f64 = 1e-12;

/// (gain, innovation variance, innovation) of one sequential element
/// update.
type CellUpdate = Option<(DVector<f64>, f64, f64)>;

/// Which filter/smoother implementation to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Engine {
    Multivariate,
    Univariate,
}

/// Borrowed inputs of one filter/smoother pass. The state dimension `m` is
/// the factor count for IID errors or factors plus series for AR(1).
#[derive(Debug, Clone, Copy)]
pub struct KfsInput<'a> {
    /// `n x p` observations, NaN at missing cells.
    pub observations: &'a DMatrix<f64>,
    /// `n x p` observation mask (`true` = observed).
    pub mask: &'a DMatrix<bool>,
    /// `p x m` measurement loadings.
    pub loadings: &'a DMatrix<f64>,
    /// `m x m` state transition.
    pub transition: &'a DMatrix<f64>,
    /// `m x m` state innovation covariance.
    pub state_cov: &'a DMatrix<f64>,
    /// `p` diagonal measurement variances.
    pub meas_vars: &'a DVector<f64>,
    /// Initial state mean.
    pub init_mean: &'a DVector<f64>,
    /// Initial state covariance.
    pub init_cov: &'a DMatrix<f64>,
}

impl<'a> KfsInput<'a> {
    /// Checks dimensional coherence; returns `(n, p, m)`.
    pub fn validate(&self) -> Result<(usize, usize, usize)> {
        let (n, p) = self.observations.shape();
        let m = self.loadings.ncols();
        if n == 0 || p == 0 {
            return Err(DfmError::Invalid("observations must be non-empty".into()));
        }
        if self.mask.shape() != (n, p) {
            return Err(DfmError::Invalid("mask shape differs from observations".into()));
        }
        if self.loadings.nrows() != p {
            return Err(DfmError::Invalid("loadings must have p rows".into()));
        }
        if self.transition.shape() != (m, m) || self.state_cov.shape() != (m, m) {
            return Err(DfmError::Invalid(
                "transition and state covariance must be m x m".into(),
            ));
        }
        if self.meas_vars.len() != p {
            return Err(DfmError::Invalid("meas_vars must have length p".into()));
        }
        if self.meas_vars.iter().any(|&v| v <= 0.0 || v.is_nan()) {
            return Err(DfmError::Invalid(
                "measurement variances must be strictly positive".into(),
            ));
        }
        if self.init_mean.len() != m || self.init_cov.shape() != (m, m) {
            return Err(DfmError::Invalid("initial state must have dimension m".into()));
        }
        Ok((n, p, m))
    }
}

/// Filtered and smoothed moments plus the innovations log-likelihood.
///
/// Row `t` of the mean matrices refers to observation row `t`; covariance
/// vectors are indexed the same way. `smoothed_lag_cov[t]` is the smoothed
/// cross-covariance between the states at rows `t` and `t - 1`, where row
/// `-1` means the initial state.
#[derive(Debug, Clone)]
pub struct KfsOutput {
    pub predicted_mean: DMatrix<f64>,
    pub predicted_cov: Vec<DMatrix<f64>>,
    pub filtered_mean: DMatrix<f64>,
    pub filtered_cov: Vec<DMatrix<f64>>,
    pub smoothed_mean: DMatrix<f64>,
    pub smoothed_cov: Vec<DMatrix<f64>>,
    pub smoothed_lag_cov: Vec<DMatrix<f64>>,
    pub smoothed_init_mean: DVector<f64>,
    pub smoothed_init_cov: DMatrix<f64>,
    pub loglik: f64,
}

/// Runs the chosen engine.
pub fn run_kfs(input: &KfsInput, engine: Engine) -> Result<KfsOutput> {
    match engine {
        Engine::Multivariate => kalman_multivariate(input),
        Engine::Univariate => kalman_univariate(input),
    }
}

fn not_finite(t: usize, what: &str) -> DfmError {
    DfmError::Numerical(format!(
        "non-finite {what} at step {t}; predicted covariance is numerically singular"
    ))
}

/// Innovation-covariance inverse of Eq.-13 form for diagonal measurement
/// noise: `C^-1 = S^-1 - S^-1 L (P^-1 + L' S^-1 L)^-1 L' S^-1` with
/// `S = diag(meas_vars)`. Requires `pred_cov` to be positive definite.
pub fn woodbury_inverse(
    loadings: &DMatrix<f64>,
    pred_cov: &DMatrix<f64>,
    meas_vars: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    let p = loadings.nrows();
    let m = loadings.ncols();
    if pred_cov.shape() != (m, m) || meas_vars.len() != p {
        return Err(DfmError::Invalid("woodbury: dimension mismatch".into()));
    }
    let chol_p = Cholesky::new(pred_cov.clone())
        .ok_or_else(|| DfmError::Numerical("woodbury: predicted covariance not SPD".into()))?;
    let sig_inv = meas_vars.map(|v| 1.0 / v);
    // L' S^-1 as an m x p matrix
    let mut lam_sig = loadings.transpose();
    for k in 0..p {
        lam_sig.column_mut(k).scale_mut(sig_inv[k]);
    }
    let mid = chol_p.inverse() + &lam_sig * loadings;
    let chol_mid = Cholesky::new(symmetrize(&mid))
        .ok_or_else(|| DfmError::Numerical("woodbury: inner matrix not SPD".into()))?;
    let w = chol_mid.solve(&lam_sig);
    let mut c_inv = -lam_sig.transpose() * w;
    for k in 0..p {
        c_inv[(k, k)] += sig_inv[k];
    }
    Ok(symmetrize(&c_inv))
}

/// Determinant of the innovation covariance by the triple-product identity
/// `|C| = |S| * |P| * |P^-1 + L' S^-1 L|`.
pub fn determinant_identity(
    loadings: &DMatrix<f64>,
    pred_cov: &DMatrix<f64>,
    meas_vars: &DVector<f64>,
) -> Result<f64> {
    let p = loadings.nrows();
    let m = loadings.ncols();
    if pred_cov.shape() != (m, m) || meas_vars.len() != p {
        return Err(DfmError::Invalid("determinant identity: dimension mismatch".into()));
    }
    let p_inv = pred_cov
        .clone()
        .try_inverse()
        .ok_or_else(|| DfmError::Numerical("determinant identity: singular predicted covariance".into()))?;
    let sig_inv = meas_vars.map(|v| 1.0 / v);
    let mut lam_sig = loadings.transpose();
    for k in 0..p {
        lam_sig.column_mut(k).scale_mut(sig_inv[k]);
    }
    let mid = p_inv + &lam_sig * loadings;
    let det_sig: f64 = meas_vars.iter().product();
    Ok(det_sig * pred_cov.determinant() * mid.determinant())
}

fn log_det_cholesky(chol: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

/// Log-determinant and explicit inverse of the observed-block innovation
/// covariance, via the Woodbury route when the state is smaller than the
/// observed block and by direct factorisation otherwise.
fn innovation_inverse(
    lam_o: &DMatrix<f64>,
    p_pred: &DMatrix<f64>,
    sig_o: &DVector<f64>,
    m: usize,
    pt: usize,
) -> Result<(DMatrix<f64>, f64)> {
    if m < pt {
        if let Some(chol_p) = Cholesky::new(p_pred.clone()) {
            let sig_inv = sig_o.map(|v| 1.0 / v);
            let mut lam_sig = lam_o.transpose();
            for k in 0..pt {
                lam_sig.column_mut(k).scale_mut(sig_inv[k]);
            }
            let mid = symmetrize(&(chol_p.inverse() + &lam_sig * lam_o));
            if let Some(chol_mid) = Cholesky::new(mid) {
                let w = chol_mid.solve(&lam_sig);
                let mut c_inv = -lam_sig.transpose() * w;
                for k in 0..pt {
                    c_inv[(k, k)] += sig_inv[k];
                }
                let logdet = sig_o.iter().map(|v| v.ln()).sum::<f64>()
                    + log_det_cholesky(&chol_p)
                    + log_det_cholesky(&chol_mid);
                return Ok((symmetrize(&c_inv), logdet));
            }
        }
        // fall through to the direct route if either factorisation failed
    }
    let mut c = lam_o * p_pred * lam_o.transpose();
    for k in 0..pt {
        c[(k, k)] += sig_o[k];
    }
    let c = symmetrize(&c);
    if let Some(chol) = Cholesky::new(c.clone()) {
        let logdet = log_det_cholesky(&chol);
        Ok((chol.inverse(), logdet))
    } else {
        let lu = c.clone().lu();
        let det = lu.determinant();
        if det <= 0.0 || det.is_nan() {
            return Err(DfmError::Numerical(
                "innovation covariance is not positive definite".into(),
            ));
        }
        let inv = lu
            .try_inverse()
            .ok_or_else(|| DfmError::Numerical("innovation covariance is singular".into()))?;
        Ok((inv, det.ln()))
    }
}

/// Solves `X P = B` for symmetric positive definite `P`, i.e. `X = B P^-1`.
fn right_solve_spd(b: &DMatrix<f64>, p: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    if let Some(chol) = Cholesky::new(p.clone()) {
        return Some(chol.solve(&b.transpose()).transpose());
    }
    p.clone()
        .lu()
        .solve(&b.transpose())
        .map(|x| x.transpose())
}

/// Classic multivariate Kalman filter and smoother with row deletion at
/// missing cells, the backward gain smoother, and the backward lagged
/// cross-covariance recursion.
pub fn kalman_multivariate(input: &KfsInput) -> Result<KfsOutput> {
    let (n, p, m) = input.validate()?;
    let a_mat = input.transition;
    let q_mat = input.state_cov;
    let lambda = input.loadings;

    // index = time, entry 0 = initial state
    let mut filt_mean: Vec<DVector<f64>> = Vec::with_capacity(n + 1);
    let mut filt_cov: Vec<DMatrix<f64>> = Vec::with_capacity(n + 1);
    let mut pred_mean: Vec<DVector<f64>> = Vec::with_capacity(n + 1);
    let mut pred_cov: Vec<DMatrix<f64>> = Vec::with_capacity(n + 1);
    filt_mean.push(input.init_mean.clone());
    filt_cov.push(input.init_cov.clone());
    pred_mean.push(DVector::zeros(m));
    pred_cov.push(DMatrix::zeros(m, m));

    let mut loglik = 0.0;
    let mut last_gain_loadings = DMatrix::<f64>::zeros(m, m); // K_n Lambda_n

    for t in 1..=n {
        let a_pred = a_mat * &filt_mean[t - 1];
        let p_pred = symmetrize(&(a_mat * &filt_cov[t - 1] * a_mat.transpose() + q_mat));

        let obs: Vec<usize> = (0..p).filter(|&i| input.mask[(t - 1, i)]).collect();
        let pt = obs.len();
        let (a_filt, p_filt) = if pt == 0 {
            last_gain_loadings.fill(0.0);
            (a_pred.clone(), p_pred.clone())
        } else {
            let lam_o = DMatrix::from_fn(pt, m, |k, j| lambda[(obs[k], j)]);
            let x_o = DVector::from_fn(pt, |k, _| input.observations[(t - 1, obs[k])]);
            let sig_o = DVector::from_fn(pt, |k, _| input.meas_vars[obs[k]]);
            let v = &x_o - &lam_o * &a_pred;
            let (c_inv, logdet) = innovation_inverse(&lam_o, &p_pred, &sig_o, m, pt)?;
            let gain = &p_pred * lam_o.transpose() * &c_inv;
            let a_f = &a_pred + &gain * &v;
            let p_f = symmetrize(&(&p_pred - &gain * &lam_o * &p_pred));
            let quad = (&c_inv * &v).dot(&v);
            loglik -= 0.5 * (pt as f64 * LN_2PI + logdet + quad);
            last_gain_loadings = &gain * &lam_o;
            (a_f, p_f)
        };
        if a_filt.iter().any(|x| !x.is_finite()) || p_filt.iter().any(|x| !x.is_finite()) {
            return Err(not_finite(t, "filtered state"));
        }
        pred_mean.push(a_pred);
        pred_cov.push(p_pred);
        filt_mean.push(a_filt);
        filt_cov.push(p_filt);
    }
    if !loglik.is_finite() {
        return Err(DfmError::Numerical("non-finite log-likelihood".into()));
    }

    // Backward pass: smoothed moments plus the gain matrices J_t linking
    // time t to t + 1, kept for the lag recursion.
    let mut sm_mean = vec![DVector::<f64>::zeros(m); n + 1];
    let mut sm_cov = vec![DMatrix::<f64>::zeros(m, m); n + 1];
    let mut jmat = vec![DMatrix::<f64>::zeros(m, m); n];
    sm_mean[n] = filt_mean[n].clone();
    sm_cov[n] = filt_cov[n].clone();
    for t in (0..n).rev() {
        // J_t = P_{t|t} A' (P_{t+1|t})^-1
        let b = &filt_cov[t] * a_mat.transpose();
        let j_t = right_solve_spd(&b, &pred_cov[t + 1])
            .ok_or_else(|| not_finite(t + 1, "smoother gain"))?;
        sm_mean[t] = &filt_mean[t] + &j_t * (&sm_mean[t + 1] - &pred_mean[t + 1]);
        sm_cov[t] = symmetrize(
            &(&filt_cov[t] + &j_t * (&sm_cov[t + 1] - &pred_cov[t + 1]) * j_t.transpose()),
        );
        jmat[t] = j_t;
    }

    // Lagged cross-covariances, initialised at the filtered end point.
    let mut lag = vec![DMatrix::<f64>::zeros(m, m); n + 1];
    lag[n] = (DMatrix::identity(m, m) - &last_gain_loadings) * a_mat * &filt_cov[n - 1];
    for t in (2..=n).rev() {
        lag[t - 1] = &filt_cov[t - 1] * jmat[t - 2].transpose()
            + &jmat[t - 1] * (&lag[t] - a_mat * &filt_cov[t - 1]) * jmat[t - 2].transpose();
    }

    Ok(KfsOutput {
        predicted_mean: stack_rows(&pred_mean[1..]),
        predicted_cov: pred_cov[1..].to_vec(),
        filtered_mean: stack_rows(&filt_mean[1..]),
        filtered_cov: filt_cov[1..].to_vec(),
        smoothed_mean: stack_rows(&sm_mean[1..]),
        smoothed_cov: sm_cov[1..].to_vec(),
        smoothed_lag_cov: lag[1..].to_vec(),
        smoothed_init_mean: sm_mean[0].clone(),
        smoothed_init_cov: sm_cov[0].clone(),
        loglik,
    })
}

fn stack_rows(rows: &[DVector<f64>]) -> DMatrix<f64> {
    let n = rows.len();
    let m = rows[0].len();
    DMatrix::from_fn(n, m, |t, j| rows[t][j])
}

/// Sequential univariate filter and smoother. Per-element updates keep every
/// inversion scalar; the only matrix inversion is the predicted covariance
/// inside the de Jong cross-covariance, with a pseudo-inverse fallback when
/// it is numerically singular.
pub fn kalman_univariate(input: &KfsInput) -> Result<KfsOutput> {
    let (n, p, m) = input.validate()?;
    let a_mat = input.transition;
    let q_mat = input.state_cov;
    let lambda = input.loadings;
    let lam_cols: Vec<DVector<f64>> = (0..p).map(|i| lambda.row(i).transpose()).collect();

    let mut filt_mean: Vec<DVector<f64>> = Vec::with_capacity(n + 1);
    let mut filt_cov: Vec<DMatrix<f64>> = Vec::with_capacity(n + 1);
    let mut pred_mean: Vec<DVector<f64>> = Vec::with_capacity(n + 1);
    let mut pred_cov: Vec<DMatrix<f64>> = Vec::with_capacity(n + 1);
    filt_mean.push(input.init_mean.clone());
    filt_cov.push(input.init_cov.clone());
    pred_mean.push(DVector::zeros(m));
    pred_cov.push(DMatrix::zeros(m, m));

    // Per-cell update records for the backward pass; None where the
    // element was skipped.
    let mut upd: Vec<Vec<CellUpdate>> = Vec::with_capacity(n);
    let mut loglik = 0.0;

    for t in 1..=n {
        let mut a_cur = a_mat * &filt_mean[t - 1];
        let mut p_cur = symmetrize(&(a_mat * &filt_cov[t - 1] * a_mat.transpose() + q_mat));
        pred_mean.push(a_cur.clone());
        pred_cov.push(p_cur.clone());

        let mut row_store: Vec<CellUpdate> = vec![None; p];
        for i in 0..p {
            if !input.mask[(t - 1, i)] {
                continue;
            }
            let lam_i = &lam_cols[i];
            let w = &p_cur * lam_i;
            let c = lam_i.dot(&w) + input.meas_vars[i];
            if c <= 0.0 {
                // only possible through round-off; treated like a missing cell
                continue;
            }
            let v = input.observations[(t - 1, i)] - lam_i.dot(&a_cur);
            let gain = &w / c;
            a_cur += &gain * v;
            p_cur -= &w * (w.transpose() / c);
            loglik -= 0.5 * (LN_2PI + c.ln() + v * v / c);
            row_store[i] = Some((gain, c, v));
        }
        if a_cur.iter().any(|x| !x.is_finite()) || p_cur.iter().any(|x| !x.is_finite()) {
            return Err(not_finite(t, "filtered state"));
        }
        filt_mean.push(a_cur);
        filt_cov.push(symmetrize(&p_cur));
        upd.push(row_store);
    }
    if !loglik.is_finite() {
        return Err(DfmError::Numerical("non-finite log-likelihood".into()));
    }

    // Backward recursions on the cumulant vector r and matrix N. The
    // element steps are rank-one updates and stay O(m^2).
    let mut sm_mean = vec![DVector::<f64>::zeros(m); n + 1];
    let mut sm_cov = vec![DMatrix::<f64>::zeros(m, m); n + 1];
    let mut r_vec = DVector::<f64>::zeros(m);
    let mut n_mat = DMatrix::<f64>::zeros(m, m);
    for t in (1..=n).rev() {
        for i in (0..p).rev() {
            if let Some((gain, c, v)) = &upd[t - 1][i] {
                let lam_i = &lam_cols[i];
                let k_dot_r = gain.dot(&r_vec);
                r_vec += lam_i * (v / c - k_dot_r);
                let s = &n_mat * gain;
                let beta = gain.dot(&s);
                n_mat -= lam_i * s.transpose();
                n_mat -= &s * lam_i.transpose();
                n_mat += (beta + 1.0 / c) * (lam_i * lam_i.transpose());
            }
        }
        sm_mean[t] = &pred_mean[t] + &pred_cov[t] * &r_vec;
        n_mat = symmetrize(&n_mat);
        sm_cov[t] = symmetrize(&(&pred_cov[t] - &pred_cov[t] * &n_mat * &pred_cov[t]));
        r_vec = a_mat.transpose() * r_vec;
        n_mat = symmetrize(&(a_mat.transpose() * &n_mat * a_mat));
    }
    // One extra backward transition lands on the initial state.
    sm_mean[0] = input.init_mean + input.init_cov * &r_vec;
    sm_cov[0] = symmetrize(&(input.init_cov - input.init_cov * &n_mat * input.init_cov));

    // de Jong: P_{t,t-1|n} = P_{t|n} (P_{t|t-1})^-1 A P_{t-1|t-1}
    let mut lag = vec![DMatrix::<f64>::zeros(m, m); n + 1];
    for t in 1..=n {
        let rhs = a_mat * &filt_cov[t - 1];
        let solved = match Cholesky::new(pred_cov[t].clone()) {
            Some(chol) => chol.solve(&rhs),
            None => pinv(&pred_cov[t], PINV_REL_TOL) * &rhs,
        };
        lag[t] = &sm_cov[t] * solved;
    }

    Ok(KfsOutput {
        predicted_mean: stack_rows(&pred_mean[1..]),
        predicted_cov: pred_cov[1..].to_vec(),
        filtered_mean: stack_rows(&filt_mean[1..]),
        filtered_cov: filt_cov[1..].to_vec(),
        smoothed_mean: stack_rows(&sm_mean[1..]),
        smoothed_cov: sm_cov[1..].to_vec(),
        smoothed_lag_cov: lag[1..].to_vec(),
        smoothed_init_mean: sm_mean[0].clone(),
        smoothed_init_cov: sm_cov[0].clone(),
        loglik,
    })
}
