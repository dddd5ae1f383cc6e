//! The front-door fit orchestrator: one configuration type, one `fit`
//! entry point dispatching over the four estimation strategies, fitted
//! values on both scales, residuals, and h-step prediction.

use nalgebra::{DMatrix, DVector};

use crate::data::{fill_na, standardize, Standardizer, TimePanel};
use crate::error::{DfmError, Result};
use crate::estimators::{
    em_fit, pca_estimate, two_stage, CoreFit, EmConfig, EmLog, SIGMA_EPS_FLOOR,
};
use crate::kalman::Engine;
use crate::statespace::{build_ar1_augmented, Ar1Params, DfmParams, ErrorModel};
use crate::tuning::{alpha_grid_search, logspace, AlphaPath};

/// Estimation strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Alg {
    Pca,
    TwoStage,
    Em,
    EmSparse,
}

impl Alg {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "PCA" => Alg::Pca,
            "2Stage" => Alg::TwoStage,
            "EM" => Alg::Em,
            "EM-sparse" => Alg::EmSparse,
            _ => {
                return Err(DfmError::Invalid(format!(
                    "unknown algorithm '{s}' (expected PCA, 2Stage, EM, or EM-sparse)"
                )))
            }
        })
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Alg::Pca => "PCA",
            Alg::TwoStage => "2Stage",
            Alg::Em => "EM",
            Alg::EmSparse => "EM-sparse",
        }
    }
}

/// Fit configuration. `new` fills in the package defaults: EM-sparse with
/// IID errors, the univariate filter, standardisation on, a 100-point
/// log grid from 1e-2 to 1e3, 100 EM iterations at threshold 1e-4, q = 0.
#[derive(Debug, Clone)]
pub struct FitConfig {
    pub n_factors: usize,
    /// Leading variables exempt from the L1 penalty.
    pub n_unpenalized: usize,
    pub alphas: Vec<f64>,
    pub alg: Alg,
    pub error_model: ErrorModel,
    pub engine: Engine,
    pub store_all_alphas: bool,
    pub standardize: bool,
    pub max_iter: usize,
    pub threshold: f64,
}

impl FitConfig {
    pub fn new(n_factors: usize) -> Self {
        FitConfig {
            n_factors,
            n_unpenalized: 0,
            alphas: logspace(-2.0, 3.0, 100).expect("default grid is valid"),
            alg: Alg::EmSparse,
            error_model: ErrorModel::Iid,
            engine: Engine::Univariate,
            store_all_alphas: false,
            standardize: true,
            max_iter: 100,
            threshold: 1e-4,
        }
    }
}

/// A fitted model: parameters, smoothed factors, fitted values on the
/// estimation and original scales, residuals over observed cells, and the
/// tuning/iteration diagnostics.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub config: FitConfig,
    pub params: DfmParams,
    pub ar1: Option<Ar1Params>,
    pub standardizer: Standardizer,
    /// `n x r` smoothed factor means.
    pub factors: DMatrix<f64>,
    /// Smoothed factor covariance per row.
    pub factor_cov: Vec<DMatrix<f64>>,
    /// Measurement fit on the estimation scale (`Lambda a_{t|n}`, plus the
    /// smoothed idiosyncratic state for AR(1) fits); defined at every cell,
    /// which is where nowcasts of missing cells come from.
    pub fitted_scaled: DMatrix<f64>,
    /// Fitted values mapped back to the original scale.
    pub fitted_unscaled: DMatrix<f64>,
    /// Estimation-scale residuals on observed cells; NaN where missing.
    pub residuals: DMatrix<f64>,
    pub em_log: EmLog,
    pub alpha_path: Option<AlphaPath>,
    /// Innovations log-likelihood of the final parameters (absent for PCA).
    pub loglik: Option<f64>,
    /// Column names and time labels of the fitted panel.
    pub names: Vec<String>,
    pub index: Vec<String>,
    /// Smoothed AR(1) idiosyncratic states (`n x p`), present for AR(1)
    /// fits.
    pub idio_smooth: Option<DMatrix<f64>>,
    pub(crate) last_state_mean: DVector<f64>,
    pub(crate) last_state_cov: DMatrix<f64>,
}

impl FitResult {
    pub fn fitted(&self) -> &DMatrix<f64> {
        &self.fitted_unscaled
    }

    pub fn residuals(&self) -> &DMatrix<f64> {
        &self.residuals
    }
}

/// Fits a dynamic factor model per the configuration. The panel is
/// standardised first (unless disabled); PCA runs on the interpolated
/// balanced matrix, the dynamic strategies run the filter/smoother on the
/// masked panel directly; EM-sparse sweeps the alpha grid and keeps the
/// BIC-optimal fit from the warm-started sweep.
pub fn fit(panel: &TimePanel, config: &FitConfig) -> Result<FitResult> {
    let (n, p) = (panel.n_rows(), panel.n_cols());
    let r = config.n_factors;
    if r == 0 || r >= n.min(p) {
        return Err(DfmError::Invalid(format!(
            "factor count must satisfy 1 <= r < min(n, p) = {}",
            n.min(p)
        )));
    }
    if config.n_unpenalized > p {
        return Err(DfmError::Invalid("q cannot exceed the number of variables".into()));
    }

    let (scaled_values, standardizer) = if config.standardize {
        standardize(panel.values(), panel.mask())?
    } else {
        (panel.values().clone(), Standardizer::identity(p))
    };
    let scaled = panel.with_values(scaled_values)?;

    let (core, alpha_path) = match config.alg {
        Alg::Pca => (pca_core(&scaled, r)?, None),
        Alg::TwoStage => (
            two_stage(&scaled, r, config.error_model, config.engine)?,
            None,
        ),
        Alg::Em => {
            let cfg = em_config(config, None);
            (em_fit(&scaled, &cfg, None)?, None)
        }
        Alg::EmSparse => {
            if config.alphas.is_empty() {
                return Err(DfmError::Invalid("EM-sparse needs a non-empty alpha grid".into()));
            }
            let base = em_config(config, None);
            let (path, fit) = alpha_grid_search(
                &scaled,
                &config.alphas,
                &base,
                config.n_unpenalized,
                config.store_all_alphas,
            )?;
            (fit, Some(path))
        }
    };

    Ok(assemble(panel, &scaled, config.clone(), core, alpha_path, standardizer))
}

fn em_config(config: &FitConfig, penalty: Option<crate::estimators::EmPenalty>) -> EmConfig {
    EmConfig {
        n_factors: config.n_factors,
        error_model: config.error_model,
        engine: config.engine,
        max_iter: config.max_iter,
        threshold: config.threshold,
        penalty,
    }
}

/// PCA-only fit packaged into the shared core shape: static factors, no
/// dynamics, zero factor covariances.
fn pca_core(scaled: &TimePanel, r: usize) -> Result<CoreFit> {
    let (balanced, _) = fill_na(scaled)?;
    let (loadings, factors) = pca_estimate(&balanced, r)?;
    let (n, p) = balanced.shape();
    let mut idio_vars = DVector::from_element(p, SIGMA_EPS_FLOOR);
    for i in 0..p {
        let lam_i = loadings.row(i).transpose();
        let mut acc = 0.0;
        let mut count = 0usize;
        for t in 0..n {
            if scaled.is_observed(t, i) {
                acc += (scaled.values()[(t, i)] - lam_i.dot(&factors.row(t).transpose())).powi(2);
                count += 1;
            }
        }
        if count > 0 {
            idio_vars[i] = (acc / count as f64).max(SIGMA_EPS_FLOOR);
        }
    }
    let params = DfmParams {
        loadings,
        transition: DMatrix::zeros(r, r),
        state_cov: DMatrix::zeros(r, r),
        idio_vars,
        init_mean: DVector::zeros(r),
        init_cov: DMatrix::zeros(r, r),
    };
    Ok(CoreFit {
        params,
        ar1: None,
        last_state_mean: factors.row(n - 1).transpose(),
        last_state_cov: DMatrix::zeros(r, r),
        factor_cov: vec![DMatrix::zeros(r, r); n],
        factors,
        idio_smooth: None,
        aug_init: None,
        loglik: f64::NAN,
        em_log: EmLog::default(),
        admm: None,
    })
}

fn assemble(
    panel: &TimePanel,
    scaled: &TimePanel,
    config: FitConfig,
    core: CoreFit,
    alpha_path: Option<AlphaPath>,
    standardizer: Standardizer,
) -> FitResult {
    let (n, p) = (panel.n_rows(), panel.n_cols());
    let mut fitted_scaled = &core.factors * core.params.loadings.transpose();
    if let Some(idio) = &core.idio_smooth {
        fitted_scaled += idio;
    }
    let fitted_unscaled = standardizer.unscale(&fitted_scaled);
    let residuals = DMatrix::from_fn(n, p, |t, i| {
        if panel.is_observed(t, i) {
            scaled.values()[(t, i)] - fitted_scaled[(t, i)]
        } else {
            f64::NAN
        }
    });
    let loglik = if core.loglik.is_finite() {
        Some(core.loglik)
    } else {
        None
    };
    FitResult {
        config,
        params: core.params,
        ar1: core.ar1,
        standardizer,
        factors: core.factors,
        factor_cov: core.factor_cov,
        fitted_scaled,
        fitted_unscaled,
        residuals,
        em_log: core.em_log,
        alpha_path,
        loglik,
        names: panel.names().to_vec(),
        index: panel.index().to_vec(),
        idio_smooth: core.idio_smooth,
        last_state_mean: core.last_state_mean,
        last_state_cov: core.last_state_cov,
    }
}

/// Runs only the filter/smoother at fixed parameters (no estimation) and
/// packages the result like `fit`. Used to re-apply a trained model to a
/// new window and by tests that need an estimation-free smoother pass.
/// `standardizer` transforms the panel onto the scale the parameters were
/// estimated on (pass `None` for raw-scale parameters).
pub fn smooth_with_params(
    panel: &TimePanel,
    params: &DfmParams,
    ar1: Option<&Ar1Params>,
    engine: Engine,
    standardizer: Option<&Standardizer>,
) -> Result<FitResult> {
    params.validate()?;
    let p = panel.n_cols();
    if params.n_series() != p {
        return Err(DfmError::Invalid(format!(
            "parameters cover {} series but the panel has {p}",
            params.n_series()
        )));
    }
    let std = standardizer
        .cloned()
        .unwrap_or_else(|| Standardizer::identity(p));
    let scaled = panel.with_values(std.scale(panel.values()))?;

    let kfs = match ar1 {
        None => {
            let input = crate::kalman::KfsInput {
                observations: scaled.values(),
                mask: scaled.mask(),
                loadings: &params.loadings,
                transition: &params.transition,
                state_cov: &params.state_cov,
                meas_vars: &params.idio_vars,
                init_mean: &params.init_mean,
                init_cov: &params.init_cov,
            };
            crate::kalman::run_kfs(&input, engine)?
        }
        Some(ar1) => {
            let aug = build_ar1_augmented(params, ar1)?;
            let input = crate::kalman::KfsInput {
                observations: scaled.values(),
                mask: scaled.mask(),
                loadings: &aug.loadings,
                transition: &aug.transition,
                state_cov: &aug.state_cov,
                meas_vars: &aug.meas_vars,
                init_mean: &aug.init_mean,
                init_cov: &aug.init_cov,
            };
            crate::kalman::run_kfs(&input, engine)?
        }
    };

    let n = panel.n_rows();
    let r = params.n_factors();
    let em_log = EmLog {
        logliks: vec![kfs.loglik],
        deltas: Vec::new(),
        iterations: 0,
        converged: true,
    };
    let core = CoreFit {
        params: params.clone(),
        ar1: ar1.cloned(),
        factors: kfs.smoothed_mean.columns(0, r).into_owned(),
        factor_cov: kfs
            .smoothed_cov
            .iter()
            .map(|c| c.view((0, 0), (r, r)).into_owned())
            .collect(),
        idio_smooth: ar1.map(|_| kfs.smoothed_mean.columns(r, p).into_owned()),
        aug_init: None,
        last_state_mean: kfs.smoothed_mean.row(n - 1).transpose(),
        last_state_cov: kfs.smoothed_cov[n - 1].clone(),
        loglik: kfs.loglik,
        em_log,
        admm: None,
    };
    let mut config = FitConfig::new(r);
    config.alg = Alg::TwoStage;
    config.engine = engine;
    config.error_model = if ar1.is_some() {
        ErrorModel::Ar1
    } else {
        ErrorModel::Iid
    };
    config.standardize = standardizer.is_some();
    Ok(assemble(panel, &scaled, config, core, None, std))
}

/// Point forecasts `h` steps past the sample, with the state covariance
/// propagated alongside.
#[derive(Debug, Clone)]
pub struct Forecast {
    /// `h x r` factor forecasts.
    pub factors: DMatrix<f64>,
    /// `h x p` series forecasts on the estimation scale.
    pub series_scaled: DMatrix<f64>,
    /// `h x p` series forecasts on the original scale.
    pub series_unscaled: DMatrix<f64>,
    /// Forecast state covariance per step (full state).
    pub state_cov: Vec<DMatrix<f64>>,
}

/// Forecasts factors by powering the transition from the final smoothed
/// state and maps them through the loadings; AR(1) fits also propagate the
/// final idiosyncratic states.
pub fn predict_h(fit: &FitResult, horizon: usize) -> Result<Forecast> {
    if horizon == 0 {
        return Err(DfmError::Invalid("forecast horizon must be at least 1".into()));
    }
    if fit.config.alg == Alg::Pca {
        return Err(DfmError::Invalid(
            "PCA fits have no transition matrix; fit with 2Stage, EM, or EM-sparse to forecast"
                .into(),
        ));
    }
    let r = fit.params.n_factors();
    let p = fit.params.n_series();

    // Full-state transition and innovation covariance (augmented for AR1).
    let (transition, state_cov) = match &fit.ar1 {
        None => (fit.params.transition.clone(), fit.params.state_cov.clone()),
        Some(ar1) => {
            let aug = build_ar1_augmented(&fit.params, ar1)?;
            (aug.transition, aug.state_cov)
        }
    };

    let mut state = fit.last_state_mean.clone();
    let mut cov = fit.last_state_cov.clone();
    let mut factors = DMatrix::zeros(horizon, r);
    let mut series_scaled = DMatrix::zeros(horizon, p);
    let mut covs = Vec::with_capacity(horizon);
    for k in 0..horizon {
        state = &transition * state;
        cov = crate::linalg::symmetrize(&(&transition * cov * transition.transpose() + &state_cov));
        for j in 0..r {
            factors[(k, j)] = state[j];
        }
        let f_k = state.rows(0, r).into_owned();
        let mut x_k = &fit.params.loadings * f_k;
        if fit.ar1.is_some() {
            x_k += state.rows(r, p).into_owned();
        }
        series_scaled.set_row(k, &x_k.transpose());
        covs.push(cov.clone());
    }
    let series_unscaled = fit.standardizer.unscale(&series_scaled);
    Ok(Forecast {
        factors,
        series_scaled,
        series_unscaled,
        state_cov: covs,
    })
}
