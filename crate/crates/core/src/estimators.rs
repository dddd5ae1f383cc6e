//! The four estimation strategies: PCA, two-stage, EM, and the penalised
//! EM-sparse variant, together with the M-step closed forms and the
//! convergence test.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::data::{fill_na, TimePanel};
use crate::error::{DfmError, Result};
use crate::kalman::{run_kfs, Engine, KfsInput, KfsOutput};
use crate::linalg::{floor_eigenvalues, solve_discrete_lyapunov, spectral_norm, symmetrize};
use crate::sparse_admm::{admm_solve_rows, AdmmState, RowSystems};
use crate::statespace::{
    build_ar1_augmented, Ar1Params, DfmParams, ErrorModel, DEFAULT_KAPPA,
};

/// Floor on idiosyncratic variances; stops degenerate collapse when the
/// common component fits a series exactly.
pub const SIGMA_EPS_FLOOR: f64 = 1e-8;
/// Eigenvalue floor on the state innovation covariance.
pub const STATE_COV_FLOOR: f64 = 1e-10;
/// Spectral norm a nonstationary transition estimate is rescaled to.
const TRANSITION_RESCALE: f64 = 0.99;

/// Smoothed second moments of the state, the inputs of every M-step formula:
/// `S_{t|n} = a a' + P_{t|n}` and `S_{t,t-1|n} = a_t a_{t-1}' + P_{t,t-1|n}`.
#[derive(Debug, Clone)]
pub struct SmoothedMoments {
    /// `n x m` smoothed means.
    pub means: DMatrix<f64>,
    /// `S_{t|n}` per row.
    pub second: Vec<DMatrix<f64>>,
    /// `S_{t,t-1|n}` per row; at `t = 0` the lag partner is the initial
    /// state.
    pub second_lag: Vec<DMatrix<f64>>,
    /// Smoothed initial mean `a_{0|n}`.
    pub init_mean: DVector<f64>,
    /// Smoothed initial covariance `P_{0|n}`.
    pub init_cov: DMatrix<f64>,
    /// `S_{0|n}`.
    pub init_second: DMatrix<f64>,
}

impl SmoothedMoments {
    pub fn from_kfs(kfs: &KfsOutput) -> Self {
        let n = kfs.smoothed_mean.nrows();
        let mut second = Vec::with_capacity(n);
        let mut second_lag = Vec::with_capacity(n);
        for t in 0..n {
            let a_t = kfs.smoothed_mean.row(t).transpose();
            second.push(symmetrize(&(&a_t * a_t.transpose() + &kfs.smoothed_cov[t])));
            let a_prev = if t == 0 {
                kfs.smoothed_init_mean.clone()
            } else {
                kfs.smoothed_mean.row(t - 1).transpose()
            };
            second_lag.push(&a_t * a_prev.transpose() + &kfs.smoothed_lag_cov[t]);
        }
        let init_second = symmetrize(
            &(&kfs.smoothed_init_mean * kfs.smoothed_init_mean.transpose()
                + &kfs.smoothed_init_cov),
        );
        SmoothedMoments {
            means: kfs.smoothed_mean.clone(),
            second,
            second_lag,
            init_mean: kfs.smoothed_init_mean.clone(),
            init_cov: kfs.smoothed_init_cov.clone(),
            init_second,
        }
    }

    /// State dimension.
    pub fn dim(&self) -> usize {
        self.means.ncols()
    }

    /// Number of time rows.
    pub fn len(&self) -> usize {
        self.means.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Restriction of augmented-state moments to the leading `r` factor
    /// coordinates.
    fn factor_block(&self, r: usize) -> SmoothedMoments {
        SmoothedMoments {
            means: self.means.columns(0, r).into_owned(),
            second: self
                .second
                .iter()
                .map(|s| s.view((0, 0), (r, r)).into_owned())
                .collect(),
            second_lag: self
                .second_lag
                .iter()
                .map(|s| s.view((0, 0), (r, r)).into_owned())
                .collect(),
            init_mean: self.init_mean.rows(0, r).into_owned(),
            init_cov: self.init_cov.view((0, 0), (r, r)).into_owned(),
            init_second: self.init_second.view((0, 0), (r, r)).into_owned(),
        }
    }
}

/// Iteration history of one EM run.
#[derive(Debug, Clone, Default)]
pub struct EmLog {
    /// Innovations log-likelihood at the parameters entering each iteration,
    /// plus a final entry for the returned parameters.
    pub logliks: Vec<f64>,
    /// Relative-change criterion `M_j` per completed iteration.
    pub deltas: Vec<f64>,
    /// Completed M-steps.
    pub iterations: usize,
    pub converged: bool,
}

/// Estimation output shared by the dynamic algorithms (two-stage, EM,
/// EM-sparse); the model front door wraps this into a `FitResult`.
#[derive(Debug, Clone)]
pub struct CoreFit {
    pub params: DfmParams,
    pub ar1: Option<Ar1Params>,
    /// `n x r` smoothed factor means.
    pub factors: DMatrix<f64>,
    /// Smoothed factor covariance per row (`r x r`).
    pub factor_cov: Vec<DMatrix<f64>>,
    /// Smoothed AR(1) idiosyncratic states (`n x p`), AR(1) fits only.
    pub idio_smooth: Option<DMatrix<f64>>,
    /// Augmented initial state attached to the returned parameters (AR(1)
    /// fits only); the factor-level initial state lives in `params`.
    pub aug_init: Option<(DVector<f64>, DMatrix<f64>)>,
    /// Full smoothed state at the final row.
    pub last_state_mean: DVector<f64>,
    /// Full smoothed state covariance at the final row.
    pub last_state_cov: DMatrix<f64>,
    pub loglik: f64,
    pub em_log: EmLog,
    /// Final ADMM state of a penalised fit; the warm start of the next
    /// penalty grid point.
    pub admm: Option<AdmmState>,
}

/// EM configuration; `penalty` switches the loadings update from the dense
/// closed form to the ADMM solve.
#[derive(Debug, Clone)]
pub struct EmConfig {
    pub n_factors: usize,
    pub error_model: ErrorModel,
    pub engine: Engine,
    pub max_iter: usize,
    pub threshold: f64,
    pub penalty: Option<EmPenalty>,
}

/// L1 penalty settings of the EM-sparse variant.
#[derive(Debug, Clone, Copy)]
pub struct EmPenalty {
    pub alpha: f64,
    /// Leading variables exempt from the penalty.
    pub n_unpenalized: usize,
}

/// Warm start carried along the penalty grid: previous parameters plus the
/// ADMM split state.
#[derive(Debug, Clone)]
pub struct WarmStart {
    pub params: DfmParams,
    pub ar1: Option<Ar1Params>,
    pub aug_init: Option<(DVector<f64>, DMatrix<f64>)>,
    pub admm: Option<AdmmState>,
}

/// Principal-components estimate on a complete, column-centred matrix:
/// loadings are the top-`r` eigenvectors of the sample covariance scaled so
/// `Lambda' Lambda / p = I_r`, factors are `p^-1 Lambda' X_t`. Each loading
/// column is flipped so its largest-magnitude entry is positive.
pub fn pca_estimate(x: &DMatrix<f64>, r: usize) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let (n, p) = x.shape();
    if r == 0 || r >= n.min(p) {
        return Err(DfmError::Invalid(format!(
            "factor count must satisfy 1 <= r < min(n, p) = {}",
            n.min(p)
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(DfmError::Invalid(
            "PCA input must be complete (interpolate first)".into(),
        ));
    }
    let cov = symmetrize(&(x.transpose() * x / n as f64));
    let eig = cov.symmetric_eigen();
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .expect("finite eigenvalues")
    });
    let mut loadings = DMatrix::zeros(p, r);
    for (j, &col) in order.iter().take(r).enumerate() {
        let mut v = eig.eigenvectors.column(col).into_owned();
        let mut arg = 0;
        for k in 1..p {
            if v[k].abs() > v[arg].abs() {
                arg = k;
            }
        }
        if v[arg] < 0.0 {
            v = -v;
        }
        loadings.set_column(j, &(v * (p as f64).sqrt()));
    }
    let factors = x * &loadings / p as f64;
    Ok((loadings, factors))
}

/// Stage-one initial parameters: PCA loadings/factors on the interpolated
/// panel, residual variances over observed cells, a least-squares VAR(1) on
/// the PCA factors, and the stationary initial covariance from the Lyapunov
/// solve (`alpha_0 = 0`). A nonstationary VAR estimate is rescaled before
/// the solve.
pub fn init_params(panel: &TimePanel, r: usize) -> Result<DfmParams> {
    let (balanced, _) = fill_na(panel)?;
    let (loadings, factors) = pca_estimate(&balanced, r)?;
    let (n, p) = balanced.shape();

    let mut idio_vars = DVector::from_element(p, SIGMA_EPS_FLOOR);
    for i in 0..p {
        let lam_i = loadings.row(i).transpose();
        let mut acc = 0.0;
        let mut count = 0usize;
        for t in 0..n {
            if panel.is_observed(t, i) {
                let fitted = lam_i.dot(&factors.row(t).transpose());
                acc += (panel.values()[(t, i)] - fitted).powi(2);
                count += 1;
            }
        }
        if count > 0 {
            idio_vars[i] = (acc / count as f64).max(SIGMA_EPS_FLOOR);
        }
    }

    let (transition, state_cov) = var1_fit(&factors)?;
    let transition = rescale_if_nonstationary(transition);
    let init_cov = solve_discrete_lyapunov(&transition, &state_cov)?;
    Ok(DfmParams {
        loadings,
        transition,
        state_cov,
        idio_vars,
        init_mean: DVector::zeros(r),
        init_cov,
    })
}

/// Least-squares VAR(1) fit on a factor path: regression of `F_t` on
/// `F_{t-1}` and the residual covariance (eigenvalue-floored).
fn var1_fit(factors: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let (n, r) = factors.shape();
    if n < 3 {
        return Err(DfmError::Invalid("VAR(1) fit needs at least 3 rows".into()));
    }
    let mut gram = DMatrix::zeros(r, r);
    let mut cross = DMatrix::zeros(r, r);
    for t in 1..n {
        let prev = factors.row(t - 1).transpose();
        let cur = factors.row(t).transpose();
        gram += &prev * prev.transpose();
        cross += &cur * prev.transpose();
    }
    let transition = solve_right(&cross, &gram)
        .ok_or_else(|| DfmError::Numerical("VAR(1) design matrix is singular".into()))?;
    let mut resid_cov = DMatrix::zeros(r, r);
    for t in 1..n {
        let u = factors.row(t).transpose() - &transition * factors.row(t - 1).transpose();
        resid_cov += &u * u.transpose();
    }
    resid_cov /= (n - 1) as f64;
    Ok((transition, floor_eigenvalues(&resid_cov, STATE_COV_FLOOR)))
}

/// Solves `X G = B` for symmetric `G`, i.e. `X = B G^-1`.
fn solve_right(b: &DMatrix<f64>, g: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    if let Some(chol) = Cholesky::new(symmetrize(g)) {
        return Some(chol.solve(&b.transpose()).transpose());
    }
    g.clone().lu().solve(&b.transpose()).map(|x| x.transpose())
}

fn rescale_if_nonstationary(mut a: DMatrix<f64>) -> DMatrix<f64> {
    let norm = spectral_norm(&a);
    if norm >= 1.0 {
        a *= TRANSITION_RESCALE / norm;
    }
    a
}

/// AR(1) initialisation: coefficients from the lag-1 autocorrelation of the
/// PCA residuals (clipped inside the unit circle), innovation variances from
/// the implied stationary variance, default measurement jitter.
pub fn init_ar1_params(panel: &TimePanel, r: usize) -> Result<(DfmParams, Ar1Params)> {
    let params = init_params(panel, r)?;
    let (balanced, _) = fill_na(panel)?;
    let (n, p) = balanced.shape();
    let resid = &balanced - &(&balanced * &params.loadings / p as f64) * params.loadings.transpose();

    let mut ar_coeffs = DVector::zeros(p);
    let mut innov_vars = DVector::from_element(p, SIGMA_EPS_FLOOR);
    for i in 0..p {
        let col: Vec<f64> = (0..n).map(|t| resid[(t, i)]).collect();
        let mean = col.iter().sum::<f64>() / n as f64;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        let mut num = 0.0;
        let mut den = 0.0;
        for t in 1..n {
            num += (col[t] - mean) * (col[t - 1] - mean);
            den += (col[t - 1] - mean).powi(2);
        }
        let phi = if den > 0.0 { (num / den).clamp(-0.99, 0.99) } else { 0.0 };
        ar_coeffs[i] = phi;
        innov_vars[i] = ((1.0 - phi * phi) * var).max(SIGMA_EPS_FLOOR);
    }
    Ok((
        params,
        Ar1Params {
            ar_coeffs,
            innov_vars,
            kappa: DEFAULT_KAPPA,
        },
    ))
}

/// Transition M-step: `A` solves the normal equations of regressing the
/// smoothed state on its lag through the complete second moments, and the
/// innovation covariance follows from the residual moment identity:
/// `A = (sum S_{t,t-1|n}) (sum S_{t-1|n})^-1`,
/// `Sigma_u = n^-1 sum [S_{t|n} - A S_{t,t-1|n}']` (symmetrised, floored).
pub fn m_step_transition(moments: &SmoothedMoments) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let n = moments.len();
    let m = moments.dim();
    let mut sum_prev = moments.init_second.clone();
    for t in 0..n - 1 {
        sum_prev += &moments.second[t];
    }
    let mut sum_lag = DMatrix::zeros(m, m);
    let mut sum_curr = DMatrix::zeros(m, m);
    for t in 0..n {
        sum_lag += &moments.second_lag[t];
        sum_curr += &moments.second[t];
    }
    let transition = solve_right(&sum_lag, &sum_prev).ok_or_else(|| {
        DfmError::Numerical("singular sum of lagged smoothed second moments".into())
    })?;
    let state_cov = (sum_curr - &transition * sum_lag.transpose()) / n as f64;
    let state_cov = floor_eigenvalues(&symmetrize(&state_cov), STATE_COV_FLOOR);
    Ok((rescale_if_nonstationary(transition), state_cov))
}

/// Dense loadings M-step. The Kronecker system decomposes by variable
/// because the selection matrices are diagonal: row `i` solves
/// `(sum_{t: i observed} S_{t|n}) Lambda_i' = sum_{t: i observed} X_it a_{t|n}`.
pub fn m_step_lambda_dense(
    x: &DMatrix<f64>,
    mask: &DMatrix<bool>,
    moments: &SmoothedMoments,
) -> Result<DMatrix<f64>> {
    let (n, p) = x.shape();
    let r = moments.dim();
    if moments.len() != n || mask.shape() != (n, p) {
        return Err(DfmError::Invalid("loadings M-step: dimension mismatch".into()));
    }
    let mut loadings = DMatrix::zeros(p, r);
    for i in 0..p {
        let mut gram = DMatrix::zeros(r, r);
        let mut rhs = DVector::zeros(r);
        let mut seen = false;
        for t in 0..n {
            if mask[(t, i)] {
                gram += &moments.second[t];
                rhs += moments.means.row(t).transpose() * x[(t, i)];
                seen = true;
            }
        }
        if !seen {
            return Err(DfmError::Column {
                column: format!("{i}"),
                message: "variable is never observed; its loading row is unidentified".into(),
            });
        }
        let row = Cholesky::new(symmetrize(&gram))
            .map(|c| c.solve(&rhs))
            .or_else(|| gram.clone().lu().solve(&rhs))
            .ok_or_else(|| {
                DfmError::Numerical(format!("singular loading system for variable {i}"))
            })?;
        loadings.row_mut(i).copy_from(&row.transpose());
    }
    Ok(loadings)
}

/// Idiosyncratic variance M-step: observed cells contribute the expected
/// squared residual, missing cells carry the previous iteration's variance
/// forward; floored elementwise.
pub fn m_step_sigma_eps(
    x: &DMatrix<f64>,
    mask: &DMatrix<bool>,
    moments: &SmoothedMoments,
    loadings: &DMatrix<f64>,
    sigma_prev: &DVector<f64>,
) -> DVector<f64> {
    let (n, p) = x.shape();
    DVector::from_fn(p, |i, _| {
        let lam_i = loadings.row(i).transpose();
        let mut acc = 0.0;
        let mut observed = 0usize;
        for t in 0..n {
            if mask[(t, i)] {
                let a_t = moments.means.row(t).transpose();
                let fit = lam_i.dot(&a_t);
                acc += x[(t, i)].powi(2) - 2.0 * x[(t, i)] * fit
                    + (&moments.second[t] * &lam_i).dot(&lam_i);
                observed += 1;
            }
        }
        let carry = (n - observed) as f64 * sigma_prev[i];
        ((acc + carry) / n as f64).max(SIGMA_EPS_FLOOR)
    })
}

/// Relative-change convergence criterion
/// `M_j = (l_j - l_{j-1}) / ((l_j + l_{j-1}) / 2)`; converged when `|M_j|`
/// is below the threshold (a zero denominator counts as converged).
pub fn em_converged(loglik: f64, loglik_prev: f64, threshold: f64) -> Result<(f64, bool)> {
    if !loglik.is_finite() || !loglik_prev.is_finite() {
        return Err(DfmError::Numerical(
            "convergence test needs finite log-likelihoods".into(),
        ));
    }
    let denom = 0.5 * (loglik + loglik_prev);
    if denom == 0.0 {
        return Ok((0.0, true));
    }
    let m_j = (loglik - loglik_prev) / denom;
    Ok((m_j, m_j.abs() < threshold))
}

/// One filter/smoother pass at the given parameters (building the augmented
/// system for AR(1) errors).
fn run_param_kfs(
    panel: &TimePanel,
    params: &DfmParams,
    ar1: Option<&Ar1Params>,
    aug_init: Option<&(DVector<f64>, DMatrix<f64>)>,
    engine: Engine,
) -> Result<KfsOutput> {
    match ar1 {
        None => {
            let input = KfsInput {
                observations: panel.values(),
                mask: panel.mask(),
                loadings: &params.loadings,
                transition: &params.transition,
                state_cov: &params.state_cov,
                meas_vars: &params.idio_vars,
                init_mean: &params.init_mean,
                init_cov: &params.init_cov,
            };
            run_kfs(&input, engine)
        }
        Some(ar1) => {
            let mut aug = build_ar1_augmented(params, ar1)?;
            if let Some((mean, cov)) = aug_init {
                aug.init_mean = mean.clone();
                aug.init_cov = cov.clone();
            }
            let input = KfsInput {
                observations: panel.values(),
                mask: panel.mask(),
                loadings: &aug.loadings,
                transition: &aug.transition,
                state_cov: &aug.state_cov,
                meas_vars: &aug.meas_vars,
                init_mean: &aug.init_mean,
                init_cov: &aug.init_cov,
            };
            run_kfs(&input, engine)
        }
    }
}

fn package_fit(
    kfs: &KfsOutput,
    params: DfmParams,
    ar1: Option<Ar1Params>,
    aug_init: Option<(DVector<f64>, DMatrix<f64>)>,
    em_log: EmLog,
    admm: Option<AdmmState>,
) -> CoreFit {
    let n = kfs.smoothed_mean.nrows();
    let r = params.n_factors();
    let p = params.n_series();
    let is_ar1 = ar1.is_some();
    let factors = kfs.smoothed_mean.columns(0, r).into_owned();
    let factor_cov = kfs
        .smoothed_cov
        .iter()
        .map(|c| c.view((0, 0), (r, r)).into_owned())
        .collect();
    let idio_smooth = if is_ar1 {
        Some(kfs.smoothed_mean.columns(r, p).into_owned())
    } else {
        None
    };
    CoreFit {
        params,
        ar1,
        factors,
        factor_cov,
        idio_smooth,
        aug_init,
        last_state_mean: kfs.smoothed_mean.row(n - 1).transpose(),
        last_state_cov: kfs.smoothed_cov[n - 1].clone(),
        loglik: kfs.loglik,
        em_log,
        admm,
    }
}

/// Two-stage estimator: stage-one initial parameters, untouched, plus one
/// smoother pass for the factors.
pub fn two_stage(
    panel: &TimePanel,
    r: usize,
    error_model: ErrorModel,
    engine: Engine,
) -> Result<CoreFit> {
    let (params, ar1) = match error_model {
        ErrorModel::Iid => (init_params(panel, r)?, None),
        ErrorModel::Ar1 => {
            let (params, ar1) = init_ar1_params(panel, r)?;
            (params, Some(ar1))
        }
    };
    let kfs = run_param_kfs(panel, &params, ar1.as_ref(), None, engine)?;
    let em_log = EmLog {
        logliks: vec![kfs.loglik],
        deltas: Vec::new(),
        iterations: 0,
        converged: true,
    };
    Ok(package_fit(&kfs, params, ar1, None, em_log, None))
}

/// Runs the EM (or EM-sparse) loop: filter/smoother expectation step, closed
/// form (or ADMM) maximisation step, initial-state update each iteration,
/// until the relative log-likelihood change falls below the threshold or the
/// iteration cap is hit (returned as non-converged, not an error).
pub fn em_fit(panel: &TimePanel, cfg: &EmConfig, warm: Option<WarmStart>) -> Result<CoreFit> {
    let (n, p) = (panel.n_rows(), panel.n_cols());
    let r = cfg.n_factors;
    if r == 0 || r >= n.min(p) {
        return Err(DfmError::Invalid(format!(
            "factor count must satisfy 1 <= r < min(n, p) = {}",
            n.min(p)
        )));
    }
    if let Some(pen) = &cfg.penalty {
        if pen.alpha < 0.0 {
            return Err(DfmError::Invalid("alpha must be non-negative".into()));
        }
        if pen.n_unpenalized > p {
            return Err(DfmError::Invalid("q cannot exceed the number of variables".into()));
        }
    }

    let (mut params, mut ar1, mut aug_init, mut admm_state) = match warm {
        Some(w) => (w.params, w.ar1, w.aug_init, w.admm),
        None => match cfg.error_model {
            ErrorModel::Iid => (init_params(panel, r)?, None, None, None),
            ErrorModel::Ar1 => {
                let (params, ar1) = init_ar1_params(panel, r)?;
                (params, Some(ar1), None, None)
            }
        },
    };

    let mut kfs = run_param_kfs(panel, &params, ar1.as_ref(), aug_init.as_ref(), cfg.engine)?;
    let mut logliks = vec![kfs.loglik];
    let mut deltas = Vec::new();
    let mut converged = false;
    let mut iterations = 0;

    while iterations < cfg.max_iter {
        let moments = SmoothedMoments::from_kfs(&kfs);
        match cfg.error_model {
            ErrorModel::Iid => {
                let (transition, state_cov) = m_step_transition(&moments)?;
                let loadings = match &cfg.penalty {
                    None => m_step_lambda_dense(panel.values(), panel.mask(), &moments)?,
                    Some(pen) => {
                        let systems = crate::sparse_admm::iid_row_systems(
                            panel.values(),
                            panel.mask(),
                            &moments,
                            &params.idio_vars,
                        )?;
                        let (lam, state) = admm_solve_rows(
                            &systems,
                            pen.alpha,
                            pen.n_unpenalized,
                            admm_state.take(),
                        )?;
                        admm_state = Some(state);
                        lam
                    }
                };
                let idio_vars = m_step_sigma_eps(
                    panel.values(),
                    panel.mask(),
                    &moments,
                    &loadings,
                    &params.idio_vars,
                );
                params = DfmParams {
                    loadings,
                    transition,
                    state_cov,
                    idio_vars,
                    init_mean: moments.init_mean.clone(),
                    init_cov: floor_eigenvalues(&moments.init_cov, 0.0),
                };
            }
            ErrorModel::Ar1 => {
                let ar = ar1.as_mut().expect("AR(1) parameters present");
                let f_moments = moments.factor_block(r);
                let (transition, state_cov) = m_step_transition(&f_moments)?;
                let (ar_coeffs, innov_vars) = ar1_error_updates(&moments, r, p, n);
                let loadings = ar1_lambda_update(
                    panel,
                    &moments,
                    r,
                    ar.kappa,
                    cfg.penalty.as_ref(),
                    &mut admm_state,
                )?;
                params = DfmParams {
                    loadings,
                    transition,
                    state_cov,
                    idio_vars: params.idio_vars.clone(),
                    init_mean: f_moments.init_mean.clone(),
                    init_cov: floor_eigenvalues(&f_moments.init_cov, 0.0),
                };
                ar.ar_coeffs = ar_coeffs;
                ar.innov_vars = innov_vars;
                aug_init = Some((
                    moments.init_mean.clone(),
                    floor_eigenvalues(&moments.init_cov, 0.0),
                ));
            }
        }
        iterations += 1;

        kfs = run_param_kfs(panel, &params, ar1.as_ref(), aug_init.as_ref(), cfg.engine)?;
        if !kfs.loglik.is_finite() {
            return Err(DfmError::Numerical(format!(
                "non-finite log-likelihood at EM iteration {iterations}"
            )));
        }
        let prev = *logliks.last().expect("at least one log-likelihood");
        logliks.push(kfs.loglik);
        let (m_j, conv) = em_converged(kfs.loglik, prev, cfg.threshold)?;
        deltas.push(m_j);
        if conv {
            converged = true;
            break;
        }
    }

    let em_log = EmLog {
        logliks,
        deltas,
        iterations,
        converged,
    };
    Ok(package_fit(&kfs, params, ar1, aug_init, em_log, admm_state))
}

/// Per-series AR(1) coefficient and innovation variance updates from the
/// diagonal error-block entries of the augmented smoothed moments; the same
/// normal equations as the factor transition, one scalar system per series.
fn ar1_error_updates(
    moments: &SmoothedMoments,
    r: usize,
    p: usize,
    n: usize,
) -> (DVector<f64>, DVector<f64>) {
    let mut ar_coeffs = DVector::zeros(p);
    let mut innov_vars = DVector::zeros(p);
    for i in 0..p {
        let d = r + i;
        let mut sum_prev = moments.init_second[(d, d)];
        for t in 0..n - 1 {
            sum_prev += moments.second[t][(d, d)];
        }
        let mut sum_lag = 0.0;
        let mut sum_curr = 0.0;
        for t in 0..n {
            sum_lag += moments.second_lag[t][(d, d)];
            sum_curr += moments.second[t][(d, d)];
        }
        let phi = if sum_prev > 0.0 {
            (sum_lag / sum_prev).clamp(-0.99, 0.99)
        } else {
            0.0
        };
        ar_coeffs[i] = phi;
        innov_vars[i] = ((sum_curr - phi * sum_lag) / n as f64).max(SIGMA_EPS_FLOOR);
    }
    (ar_coeffs, innov_vars)
}

/// Loadings update in the augmented model. The measurement equation carries
/// the smoothed error state, so the right-hand side subtracts both the error
/// mean and the factor/error cross-moment:
/// `(sum_{t:obs} S^FF_{t|n}) Lambda_i' =
///  sum_{t:obs} [(X_it - a^e_it) a^F_{t|n} - P^{F e_i}_{t|n}]`.
fn ar1_lambda_update(
    panel: &TimePanel,
    moments: &SmoothedMoments,
    r: usize,
    kappa: f64,
    penalty: Option<&EmPenalty>,
    admm_state: &mut Option<AdmmState>,
) -> Result<DMatrix<f64>> {
    let (n, p) = (panel.n_rows(), panel.n_cols());
    let mut gram = Vec::with_capacity(p);
    let mut rhs = Vec::with_capacity(p);
    for i in 0..p {
        let d = r + i;
        let mut g = DMatrix::zeros(r, r);
        let mut b = DVector::zeros(r);
        for t in 0..n {
            if panel.is_observed(t, i) {
                g += moments.second[t].view((0, 0), (r, r));
                let a_f = moments.means.view((t, 0), (1, r)).transpose();
                let cross = moments.second[t].view((0, d), (r, 1)).into_owned();
                b += a_f * panel.values()[(t, i)] - cross;
            }
        }
        if b.iter().all(|v| *v == 0.0) && g.iter().all(|v| *v == 0.0) {
            return Err(DfmError::Column {
                column: panel.names()[i].clone(),
                message: "variable is never observed; its loading row is unidentified".into(),
            });
        }
        gram.push(g);
        rhs.push(b);
    }

    match penalty {
        None => {
            let mut loadings = DMatrix::zeros(p, r);
            for i in 0..p {
                let row = Cholesky::new(symmetrize(&gram[i]))
                    .map(|c| c.solve(&rhs[i]))
                    .or_else(|| gram[i].clone().lu().solve(&rhs[i]))
                    .ok_or_else(|| {
                        DfmError::Numerical(format!("singular loading system for variable {i}"))
                    })?;
                loadings.row_mut(i).copy_from(&row.transpose());
            }
            Ok(loadings)
        }
        Some(pen) => {
            let w = 1.0 / kappa;
            let systems = RowSystems {
                gram: gram.into_iter().map(|g| g * w).collect(),
                rhs: rhs.into_iter().map(|b| b * w).collect(),
            };
            let (lam, state) =
                admm_solve_rows(&systems, pen.alpha, pen.n_unpenalized, admm_state.take())?;
            *admm_state = Some(state);
            Ok(lam)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::max_abs_diff;
    use crate::statespace::{simulate_dfm, simulate_dfm_ar1, SimRng};
    use approx::assert_abs_diff_eq;

    fn moments_from_path(path: &DMatrix<f64>, init: DVector<f64>) -> SmoothedMoments {
        // Treats a state path as exactly observed: all covariances zero.
        let n = path.nrows();
        let m = path.ncols();
        let mut second = Vec::with_capacity(n);
        let mut second_lag = Vec::with_capacity(n);
        for t in 0..n {
            let a_t = path.row(t).transpose();
            second.push(&a_t * a_t.transpose());
            let prev = if t == 0 {
                init.clone()
            } else {
                path.row(t - 1).transpose()
            };
            second_lag.push(&a_t * prev.transpose());
        }
        SmoothedMoments {
            means: path.clone(),
            second,
            second_lag,
            init_second: &init * init.transpose(),
            init_mean: init,
            init_cov: DMatrix::zeros(m, m),
        }
    }

    #[test]
    fn pca_recovers_exact_rank_one_structure() {
        let n = 30;
        let p = 6;
        let mut rng = SimRng::new(4);
        let f = DVector::from_fn(n, |_, _| rng.normal());
        let lam = DVector::from_fn(p, |_, _| rng.normal());
        let x = &f * lam.transpose();
        let (loadings, factors) = pca_estimate(&x, 1).unwrap();
        let recon = &factors * loadings.transpose();
        assert!(max_abs_diff(&recon, &x) < 1e-10);
        // imposed normalisation
        let gram = loadings.transpose() * &loadings / p as f64;
        assert!(max_abs_diff(&gram, &DMatrix::identity(1, 1)) < 1e-10);
    }

    #[test]
    fn pca_normalization_holds_generally() {
        let sim = simulate_dfm(80, 12, 3, 9, 0.0).unwrap();
        let (loadings, _) = pca_estimate(sim.panel.values(), 3).unwrap();
        let gram = loadings.transpose() * &loadings / 12.0;
        assert!(max_abs_diff(&gram, &DMatrix::identity(3, 3)) < 1e-10);
    }

    #[test]
    fn pca_subspace_close_to_truth_on_strong_factors() {
        let sim = simulate_dfm(500, 50, 2, 12, 0.0).unwrap();
        let (loadings, _) = pca_estimate(sim.panel.values(), 2).unwrap();
        let angle = principal_angle_deg(&loadings, &sim.params.loadings);
        assert!(angle < 15.0, "principal angle {angle} degrees");
    }

    /// Largest principal angle between column spans, from the singular
    /// values of the product of orthonormal bases.
    fn principal_angle_deg(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        let qa = orthonormal_basis(a);
        let qb = orthonormal_basis(b);
        let prod = qa.transpose() * qb;
        let svals = prod.svd(false, false).singular_values;
        let smin = svals.iter().fold(1.0_f64, |acc, &s| acc.min(s.min(1.0)));
        smin.acos().to_degrees()
    }

    fn orthonormal_basis(m: &DMatrix<f64>) -> DMatrix<f64> {
        let svd = m.clone().svd(true, false);
        svd.u.unwrap().columns(0, m.ncols()).into_owned()
    }

    #[test]
    fn init_params_satisfies_lyapunov_identity() {
        let sim = simulate_dfm(120, 10, 2, 33, 0.05).unwrap();
        let params = init_params(&sim.panel, 2).unwrap();
        let rhs = &params.transition * &params.init_cov * params.transition.transpose()
            + &params.state_cov;
        assert!(max_abs_diff(&params.init_cov, &rhs) < 1e-10);
        assert!(params.init_mean.iter().all(|&v| v == 0.0));
        params.validate().unwrap();
    }

    #[test]
    fn init_params_white_noise_gives_p0_near_sigma_u() {
        // Factors fit to white noise give a transition near zero, so the
        // stationary covariance is close to the innovation covariance.
        let mut rng = SimRng::new(8);
        let values = DMatrix::from_fn(300, 8, |_, _| rng.normal());
        let names = (1..=8).map(|i| format!("x{i}")).collect();
        let index = (1..=300).map(|t| t.to_string()).collect();
        let panel = TimePanel::new(values, names, index).unwrap();
        let params = init_params(&panel, 2).unwrap();
        assert!(spectral_norm(&params.transition) < 0.2);
        assert!(max_abs_diff(&params.init_cov, &params.state_cov) < 0.1);
    }

    #[test]
    fn transition_m_step_on_noiseless_path() {
        // F_t = 0.5 F_{t-1} with zero covariances recovers 0.5 exactly.
        let n = 12;
        let mut path = DMatrix::zeros(n, 1);
        let init = DVector::from_element(1, 1.0);
        let mut f = 1.0;
        for t in 0..n {
            f *= 0.5;
            path[(t, 0)] = f;
        }
        let moments = moments_from_path(&path, init);
        let (a, _) = m_step_transition(&moments).unwrap();
        assert_abs_diff_eq!(a[(0, 0)], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn transition_m_step_zero_lag_moments() {
        let n = 10;
        let mut moments = moments_from_path(
            &DMatrix::from_fn(n, 1, |t, _| (t as f64 * 0.7).sin() + 1.1),
            DVector::from_element(1, 0.4),
        );
        for lag in moments.second_lag.iter_mut() {
            lag.fill(0.0);
        }
        let (a, q) = m_step_transition(&moments).unwrap();
        assert_abs_diff_eq!(a[(0, 0)], 0.0, epsilon = 1e-14);
        let expect = moments.second.iter().map(|s| s[(0, 0)]).sum::<f64>() / n as f64;
        assert_abs_diff_eq!(q[(0, 0)], expect, epsilon = 1e-12);
    }

    #[test]
    fn transition_m_step_matches_ols_on_observed_factors() {
        // With P terms zero the update is the least-squares VAR(1) estimate.
        let sim = simulate_dfm(200, 5, 2, 14, 0.0).unwrap();
        let moments = moments_from_path(&sim.factors, DVector::zeros(2));
        let (a, _) = m_step_transition(&moments).unwrap();

        // direct OLS with the same initial-state convention (F_0 = 0)
        let mut gram = DMatrix::zeros(2, 2);
        let mut cross = DMatrix::zeros(2, 2);
        for t in 1..200 {
            let prev = sim.factors.row(t - 1).transpose();
            let cur = sim.factors.row(t).transpose();
            gram += &prev * prev.transpose();
            cross += &cur * prev.transpose();
        }
        let ols = (gram.lu().solve(&cross.transpose()).unwrap()).transpose();
        assert!(max_abs_diff(&a, &ols) < 1e-10);
    }

    #[test]
    fn m_step_is_a_fixed_point_on_noiseless_systems() {
        // Deterministic factors spanning the plane, noiseless measurements:
        // the M-step returns the generating loadings/transition.
        let a_true = DMatrix::from_row_slice(2, 2, &[0.6, -0.3, 0.2, 0.5]);
        let n = 40;
        let mut path = DMatrix::zeros(n, 2);
        let init = DVector::from_column_slice(&[1.0, -0.7]);
        let mut f = init.clone();
        for t in 0..n {
            f = &a_true * f;
            path.set_row(t, &f.transpose());
        }
        let moments = moments_from_path(&path, init);
        let (a_hat, q_hat) = m_step_transition(&moments).unwrap();
        assert!(max_abs_diff(&a_hat, &a_true) < 1e-8);
        assert!(q_hat.iter().all(|&v| v.abs() <= 1e-8));

        let mut rng = SimRng::new(2);
        let lam_true = DMatrix::from_fn(5, 2, |_, _| rng.normal());
        let x = &path * lam_true.transpose();
        let mask = DMatrix::from_element(n, 5, true);
        let lam_hat = m_step_lambda_dense(&x, &mask, &moments).unwrap();
        assert!(max_abs_diff(&lam_hat, &lam_true) < 1e-8);

        let sigma = m_step_sigma_eps(&x, &mask, &moments, &lam_hat, &DVector::from_element(5, 1.0));
        assert!(sigma.iter().all(|&s| s <= SIGMA_EPS_FLOOR + 1e-12));
    }

    /// Full `pr x pr` Kronecker assembly of the dense loadings system.
    fn dense_lambda_oracle(
        x: &DMatrix<f64>,
        mask: &DMatrix<bool>,
        moments: &SmoothedMoments,
    ) -> DMatrix<f64> {
        let (n, p) = x.shape();
        let r = moments.dim();
        let mut lhs = DMatrix::zeros(p * r, p * r);
        let mut rhs_mat = DMatrix::zeros(p, r);
        for t in 0..n {
            let w = DMatrix::from_fn(p, p, |i, j| {
                if i == j && mask[(t, i)] {
                    1.0
                } else {
                    0.0
                }
            });
            lhs += moments.second[t].kronecker(&w);
            let x_t = DVector::from_fn(p, |i, _| if mask[(t, i)] { x[(t, i)] } else { 0.0 });
            rhs_mat += &w * x_t * moments.means.row(t);
        }
        let sol = lhs
            .lu()
            .solve(&crate::linalg::vec_mat(&rhs_mat))
            .expect("oracle system solvable");
        crate::linalg::unvec(&sol, p, r)
    }

    #[test]
    fn rowwise_lambda_matches_kronecker_oracle() {
        let mut rng = SimRng::new(91);
        let n = 8;
        let p = 4;
        let r = 2;
        let mut mask = DMatrix::from_fn(n, p, |_, _| rng.uniform() > 0.35);
        for i in 0..p {
            mask[(0, i)] = true;
            mask[(3, i)] = true;
        }
        let x = DMatrix::from_fn(n, p, |t, i| if mask[(t, i)] { rng.normal() } else { f64::NAN });
        let means = DMatrix::from_fn(n, r, |_, _| rng.normal());
        let mut second = Vec::new();
        let mut second_lag = Vec::new();
        for t in 0..n {
            let a_t = means.row(t).transpose();
            let noise = DMatrix::from_fn(r, r, |_, _| 0.4 * rng.normal());
            second.push(&a_t * a_t.transpose() + &noise * noise.transpose() + DMatrix::identity(r, r) * 0.3);
            second_lag.push(DMatrix::zeros(r, r));
        }
        let moments = SmoothedMoments {
            means,
            second,
            second_lag,
            init_mean: DVector::zeros(r),
            init_cov: DMatrix::identity(r, r),
            init_second: DMatrix::identity(r, r),
        };
        let fast = m_step_lambda_dense(&x, &mask, &moments).unwrap();
        let oracle = dense_lambda_oracle(&x, &mask, &moments);
        assert!(max_abs_diff(&fast, &oracle) < 1e-10);
    }

    #[test]
    fn loading_row_from_a_single_observation() {
        // A variable observed exactly once solves its one-term system.
        let mut rng = SimRng::new(44);
        let n = 6;
        let r = 2;
        let means = DMatrix::from_fn(n, r, |_, _| rng.normal());
        let mut second = Vec::new();
        for t in 0..n {
            let a_t = means.row(t).transpose();
            second.push(&a_t * a_t.transpose() + DMatrix::identity(r, r) * 0.5);
        }
        let moments = SmoothedMoments {
            means,
            second: second.clone(),
            second_lag: vec![DMatrix::zeros(r, r); n],
            init_mean: DVector::zeros(r),
            init_cov: DMatrix::identity(r, r),
            init_second: DMatrix::identity(r, r),
        };
        let mut mask = DMatrix::from_element(n, 2, true);
        for t in 0..n {
            mask[(t, 0)] = t == 3;
        }
        let x = DMatrix::from_fn(n, 2, |t, i| {
            if mask[(t, i)] {
                (t as f64 + 1.0) * 0.3
            } else {
                f64::NAN
            }
        });
        let loadings = m_step_lambda_dense(&x, &mask, &moments).unwrap();
        let expect = second[3]
            .clone()
            .lu()
            .solve(&(moments.means.row(3).transpose() * x[(3, 0)]))
            .unwrap();
        for j in 0..r {
            assert_abs_diff_eq!(loadings[(0, j)], expect[j], epsilon = 1e-12);
        }
    }

    #[test]
    fn sigma_eps_matches_direct_expectation_oracle() {
        // Fully observed: the update equals the time average of
        // E[(X - Lambda_i F)^2 | data] expanded from a and P directly.
        let sim = simulate_dfm(50, 6, 2, 55, 0.0).unwrap();
        let params = init_params(&sim.panel, 2).unwrap();
        let kfs = run_param_kfs(&sim.panel, &params, None, None, Engine::Univariate).unwrap();
        let moments = SmoothedMoments::from_kfs(&kfs);
        let sigma = m_step_sigma_eps(
            sim.panel.values(),
            sim.panel.mask(),
            &moments,
            &params.loadings,
            &params.idio_vars,
        );
        for i in 0..6 {
            let lam_i = params.loadings.row(i).transpose();
            let mut acc = 0.0;
            for t in 0..50 {
                let a_t = kfs.smoothed_mean.row(t).transpose();
                let resid = sim.panel.values()[(t, i)] - lam_i.dot(&a_t);
                let var_term = (&kfs.smoothed_cov[t] * &lam_i).dot(&lam_i);
                acc += resid * resid + var_term;
            }
            assert_abs_diff_eq!(sigma[i], acc / 50.0, epsilon = 1e-10);
        }
    }

    #[test]
    fn sigma_eps_carries_prior_variance_for_missing_cells() {
        let sim = simulate_dfm(40, 4, 2, 66, 0.0).unwrap();
        let params = init_params(&sim.panel, 2).unwrap();
        let kfs = run_param_kfs(&sim.panel, &params, None, None, Engine::Univariate).unwrap();
        let moments = SmoothedMoments::from_kfs(&kfs);
        // mask out half of variable 0
        let mut mask = sim.panel.mask().clone();
        for t in 0..20 {
            mask[(t, 0)] = false;
        }
        let prev = DVector::from_element(4, 0.7);
        let sigma = m_step_sigma_eps(sim.panel.values(), &mask, &moments, &params.loadings, &prev);
        let lam_0 = params.loadings.row(0).transpose();
        let mut acc = 0.0;
        for t in 20..40 {
            let a_t = moments.means.row(t).transpose();
            acc += sim.panel.values()[(t, 0)].powi(2)
                - 2.0 * sim.panel.values()[(t, 0)] * lam_0.dot(&a_t)
                + (&moments.second[t] * &lam_0).dot(&lam_0);
        }
        assert_abs_diff_eq!(sigma[0], (acc + 20.0 * 0.7) / 40.0, epsilon = 1e-12);
    }

    #[test]
    fn convergence_criterion_examples() {
        let (m, flag) = em_converged(-100.0, -100.0, 1e-4).unwrap();
        assert_eq!(m, 0.0);
        assert!(flag);

        let (m, flag) = em_converged(-99.0, -101.0, 1e-4).unwrap();
        assert_abs_diff_eq!(m, -0.02, epsilon = 1e-15);
        assert!(!flag);

        let (m, flag) = em_converged(-100.000001, -100.0, 1e-4).unwrap();
        assert_abs_diff_eq!(m.abs(), 1e-8, epsilon = 1e-12);
        assert!(flag);

        let (_, flag) = em_converged(0.0, 0.0, 1e-4).unwrap();
        assert!(flag);
    }

    fn em_cfg(err: ErrorModel, engine: Engine) -> EmConfig {
        EmConfig {
            n_factors: 2,
            error_model: err,
            engine,
            max_iter: 100,
            threshold: 1e-4,
            penalty: None,
        }
    }

    #[test]
    fn em_loglik_is_monotone_without_missing() {
        let sim = simulate_dfm(100, 20, 2, 1, 0.0).unwrap();
        let fit = em_fit(&sim.panel, &em_cfg(ErrorModel::Iid, Engine::Univariate), None).unwrap();
        assert!(fit.em_log.converged, "EM did not converge");
        assert!(fit.em_log.iterations < 100);
        for w in fit.em_log.logliks.windows(2) {
            assert!(w[1] >= w[0] - 1e-6, "log-likelihood fell: {} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn em_loglik_is_monotone_with_missing_and_lower() {
        let full = simulate_dfm(100, 20, 2, 1, 0.0).unwrap();
        let holed = simulate_dfm(100, 20, 2, 1, 0.10).unwrap();
        let fit_full =
            em_fit(&full.panel, &em_cfg(ErrorModel::Iid, Engine::Univariate), None).unwrap();
        let fit_holed =
            em_fit(&holed.panel, &em_cfg(ErrorModel::Iid, Engine::Univariate), None).unwrap();
        for w in fit_holed.em_log.logliks.windows(2) {
            assert!(w[1] >= w[0] - 1e-6);
        }
        // The innovations log-likelihood sums one negative log-density term
        // per observed cell, so the panel with fewer observed cells ends
        // higher, and markedly so at 10% missing.
        assert!(
            fit_holed.loglik > fit_full.loglik,
            "holed {} vs full {}",
            fit_holed.loglik,
            fit_full.loglik
        );
        // Per observed cell the full panel is at least as well explained.
        let cells_full = full.panel.mask().iter().filter(|&&m| m).count() as f64;
        let cells_holed = holed.panel.mask().iter().filter(|&&m| m).count() as f64;
        assert!(fit_full.loglik / cells_full >= fit_holed.loglik / cells_holed - 0.05);
    }

    #[test]
    fn em_is_bit_deterministic() {
        let sim = simulate_dfm(60, 10, 2, 77, 0.1).unwrap();
        let cfg = em_cfg(ErrorModel::Iid, Engine::Univariate);
        let a = em_fit(&sim.panel, &cfg, None).unwrap();
        let b = em_fit(&sim.panel, &cfg, None).unwrap();
        assert_eq!(a.em_log.logliks.len(), b.em_log.logliks.len());
        for (x, y) in a.em_log.logliks.iter().zip(b.em_log.logliks.iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        for (x, y) in a.params.loadings.iter().zip(b.params.loadings.iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn ar1_em_recovers_error_persistence() {
        let sim = simulate_dfm_ar1(300, 10, 2, 0.5, 10, 0.0).unwrap();
        let mut cfg = em_cfg(ErrorModel::Ar1, Engine::Multivariate);
        cfg.max_iter = 50;
        let fit = em_fit(&sim.panel, &cfg, None).unwrap();
        let ar1 = fit.ar1.expect("AR(1) parameters estimated");
        let mut phis: Vec<f64> = ar1.ar_coeffs.iter().copied().collect();
        phis.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = phis[phis.len() / 2];
        assert!(
            (median - 0.5).abs() < 0.15,
            "median AR coefficient {median} too far from 0.5"
        );
        for w in fit.em_log.logliks.windows(2) {
            assert!(w[1] >= w[0] - 1e-6);
        }
    }

    #[test]
    fn two_stage_factors_track_pca_factors() {
        let sim = simulate_dfm(150, 15, 2, 23, 0.0).unwrap();
        let fit = two_stage(&sim.panel, 2, ErrorModel::Iid, Engine::Univariate).unwrap();
        let (balanced, _) = fill_na(&sim.panel).unwrap();
        let (_, pca_f) = pca_estimate(&balanced, 2).unwrap();
        // smoothing changes the factors but keeps them strongly correlated
        for j in 0..2 {
            let a: Vec<f64> = (0..150).map(|t| fit.factors[(t, j)]).collect();
            let b: Vec<f64> = (0..150).map(|t| pca_f[(t, j)]).collect();
            let corr = correlation(&a, &b);
            assert!(corr.abs() > 0.9, "factor {j} correlation {corr}");
        }
        assert_eq!(fit.em_log.iterations, 0);
    }

    fn correlation(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let ma = a.iter().sum::<f64>() / n;
        let mb = b.iter().sum::<f64>() / n;
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    #[test]
    fn two_stage_engines_agree() {
        let sim = simulate_dfm(80, 10, 2, 31, 0.1).unwrap();
        let uv = two_stage(&sim.panel, 2, ErrorModel::Iid, Engine::Univariate).unwrap();
        let mv = two_stage(&sim.panel, 2, ErrorModel::Iid, Engine::Multivariate).unwrap();
        assert!(crate::linalg::rel_diff(&uv.factors, &mv.factors) < 1e-8);
        assert!((uv.loglik - mv.loglik).abs() / uv.loglik.abs() < 1e-8);
    }

    #[test]
    fn smoother_approaches_projection_in_small_noise_limit() {
        // Fixed loadings, A = 0, tiny measurement noise: the smoothed factors
        // approach the cross-sectional projection p^-1 (L'L/p)^-1 L' X_t.
        let sim = simulate_dfm(40, 12, 2, 44, 0.0).unwrap();
        let lam = sim.params.loadings.clone();
        let params = DfmParams {
            loadings: lam.clone(),
            transition: DMatrix::zeros(2, 2),
            state_cov: DMatrix::identity(2, 2),
            idio_vars: DVector::from_element(12, 1e-6),
            init_mean: DVector::zeros(2),
            init_cov: DMatrix::identity(2, 2),
        };
        let kfs = run_param_kfs(&sim.panel, &params, None, None, Engine::Multivariate).unwrap();
        let gram_inv = (lam.transpose() * &lam / 12.0).try_inverse().unwrap();
        for t in 0..40 {
            let x_t = sim.panel.values().row(t).transpose();
            let proj = &gram_inv * (lam.transpose() * x_t) / 12.0;
            let sm = kfs.smoothed_mean.row(t).transpose();
            for j in 0..2 {
                assert_abs_diff_eq!(sm[j], proj[j], epsilon = 1e-4);
            }
        }
    }

    #[test]
    fn smoothed_second_moments_are_psd() {
        let sim = simulate_dfm(60, 8, 2, 3, 0.15).unwrap();
        let params = init_params(&sim.panel, 2).unwrap();
        let kfs = run_param_kfs(&sim.panel, &params, None, None, Engine::Univariate).unwrap();
        let moments = SmoothedMoments::from_kfs(&kfs);
        for s in &moments.second {
            let eig = s.clone().symmetric_eigen();
            assert!(eig.eigenvalues.iter().all(|&v| v > -1e-10));
        }
    }
}
