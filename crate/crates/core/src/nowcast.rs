//! Pseudo real-time nowcasting: an expanding-window evaluation that imposes
//! the publication-lag ragged edge at each window end, fits the configured
//! models, nowcasts the missing target months, undifferences back to levels,
//! and scores absolute errors.
//!
//! Windows are mutually independent and run in parallel; the report is a
//! deterministic reduction over window indices.

use nalgebra::DVector;
use rayon::prelude::*;

use crate::data::{ragged_edge, transform_data, TimePanel, TransformCode};
use crate::error::{DfmError, Result};
use crate::kalman::Engine;
use crate::model::{fit, smooth_with_params, FitConfig, FitResult};
use crate::statespace::{Ar1Params, DfmParams};

/// A model entry of the comparison: either re-estimated per window, or a
/// fixed parameter set pushed through the smoother only.
#[derive(Debug, Clone)]
pub enum HarnessModel {
    Fit { name: String, config: FitConfig },
    Fixed {
        name: String,
        params: DfmParams,
        engine: Engine,
    },
}

impl HarnessModel {
    pub fn name(&self) -> &str {
        match self {
            HarnessModel::Fit { name, .. } => name,
            HarnessModel::Fixed { name, .. } => name,
        }
    }
}

/// Expanding-window configuration. Window ends run over rows
/// `window_start..=window_end` of the level panel; targets carry a
/// two-month publication lag and must be coded as first differences so the
/// nowcasts can be undifferenced back to levels.
#[derive(Debug, Clone)]
pub struct HarnessConfig {
    /// Column indices of the target series.
    pub targets: Vec<usize>,
    /// Publication lag per column, applied as a ragged edge at each window.
    pub lags: Vec<usize>,
    /// First window-end row (0-based).
    pub window_start: usize,
    /// Last window-end row (inclusive).
    pub window_end: usize,
    /// Stationarity transform per column.
    pub codes: Vec<TransformCode>,
    pub models: Vec<HarnessModel>,
    /// Estimate each model once on the first window and rerun only the
    /// smoother afterwards.
    pub reuse_params: bool,
}

/// Absolute nowcast errors of one window, averaged over the targets; the
/// `scaled` variants divide each target's error by the standard deviation
/// of its observed differences over the first training window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowErrors {
    pub h1_abs: f64,
    pub h2_abs: f64,
    pub h1_scaled: f64,
    pub h2_scaled: f64,
}

/// One (window, model) evaluation; failures are recorded and the harness
/// continues.
#[derive(Debug, Clone)]
pub struct WindowOutcome {
    /// Window-end row index.
    pub window: usize,
    pub model: String,
    pub result: std::result::Result<WindowErrors, String>,
}

/// Mean and the 0/25/50/75/100 empirical percentiles (linear interpolation
/// between order statistics, the R default convention).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantileSummary {
    pub mean: f64,
    pub q0: f64,
    pub q25: f64,
    pub q50: f64,
    pub q75: f64,
    pub q100: f64,
}

/// One summary line: a model at a horizon, raw or per-target-scaled.
#[derive(Debug, Clone)]
pub struct SummaryRow {
    pub model: String,
    pub horizon: u8,
    pub scaled: bool,
    pub stats: QuantileSummary,
    /// Windows that produced an error value.
    pub n_windows: usize,
}

#[derive(Debug, Clone)]
pub struct HarnessReport {
    pub outcomes: Vec<WindowOutcome>,
    pub summary: Vec<SummaryRow>,
}

impl HarnessReport {
    /// Errors of one model/horizon across successful windows, in window
    /// order (raw scale).
    pub fn errors_for(&self, model: &str, horizon: u8) -> Vec<f64> {
        self.outcomes
            .iter()
            .filter(|o| o.model == model)
            .filter_map(|o| o.result.as_ref().ok())
            .map(|e| if horizon == 1 { e.h1_abs } else { e.h2_abs })
            .collect()
    }

    pub fn summary_for(&self, model: &str, horizon: u8, scaled: bool) -> Option<&SummaryRow> {
        self.summary
            .iter()
            .find(|s| s.model == model && s.horizon == horizon && s.scaled == scaled)
    }
}

/// Cumulative undifferencing: levels implied by a last observed level and a
/// run of first differences.
pub fn undifference(last_level: f64, diffs: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(diffs.len());
    let mut level = last_level;
    for d in diffs {
        level += d;
        out.push(level);
    }
    out
}

/// Mean plus 0/25/50/75/100 percentiles of a non-empty error sample.
pub fn mae_quantiles(errors: &[f64]) -> Result<QuantileSummary> {
    if errors.is_empty() {
        return Err(DfmError::Invalid("quantiles of an empty sample".into()));
    }
    let mut sorted = errors.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite errors"));
    let quantile = |q: f64| -> f64 {
        let h = q * (sorted.len() - 1) as f64;
        let lo = h.floor() as usize;
        let hi = h.ceil() as usize;
        sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
    };
    Ok(QuantileSummary {
        mean: errors.iter().sum::<f64>() / errors.len() as f64,
        q0: quantile(0.0),
        q25: quantile(0.25),
        q50: quantile(0.50),
        q75: quantile(0.75),
        q100: quantile(1.0),
    })
}

/// Parameters carried from the first window into later windows when
/// `reuse_params` is set.
#[derive(Debug, Clone)]
struct TrainedModel {
    params: DfmParams,
    ar1: Option<Ar1Params>,
    engine: Engine,
    standardizer: Option<crate::data::Standardizer>,
}

/// Runs the expanding-window exercise over a panel *in levels*.
pub fn run_harness(panel: &TimePanel, config: &HarnessConfig) -> Result<HarnessReport> {
    let (n, p) = (panel.n_rows(), panel.n_cols());
    validate_config(panel, config)?;

    // Per-target error scale: sd of the observed first differences over the
    // first training window; fixed across windows so later rows never leak
    // into the report.
    let scales: Vec<f64> = config
        .targets
        .iter()
        .map(|&j| diff_scale(panel, j, config.window_start))
        .collect();
    let _ = n;
    let _ = p;

    // With parameter reuse the first window is estimated once, serially.
    let trained: Option<Vec<TrainedModel>> = if config.reuse_params {
        let first = evaluate_window_fits(panel, config, config.window_start)?;
        Some(first)
    } else {
        None
    };

    let windows: Vec<usize> = (config.window_start..=config.window_end).collect();
    let outcomes: Vec<WindowOutcome> = windows
        .par_iter()
        .flat_map_iter(|&w| {
            let mut results = Vec::with_capacity(config.models.len());
            match window_panel(panel, config, w) {
                Err(e) => {
                    for model in &config.models {
                        results.push(WindowOutcome {
                            window: w,
                            model: model.name().to_string(),
                            result: Err(e.to_string()),
                        });
                    }
                }
                Ok(transformed) => {
                    for (k, model) in config.models.iter().enumerate() {
                        let fitted = match (&trained, model) {
                            (Some(t), _) => apply_trained(&transformed, &t[k]),
                            (None, HarnessModel::Fit { config: fc, .. }) => {
                                fit(&transformed, fc)
                            }
                            (None, HarnessModel::Fixed { params, engine, .. }) => {
                                smooth_with_params(&transformed, params, None, *engine, None)
                            }
                        };
                        let result = fitted
                            .map_err(|e| e.to_string())
                            .and_then(|f| score_window(panel, config, &scales, w, &f));
                        results.push(WindowOutcome {
                            window: w,
                            model: model.name().to_string(),
                            result,
                        });
                    }
                }
            }
            results
        })
        .collect();

    let mut summary = Vec::new();
    for model in &config.models {
        for horizon in [1u8, 2u8] {
            for scaled in [false, true] {
                let errors: Vec<f64> = outcomes
                    .iter()
                    .filter(|o| o.model == model.name())
                    .filter_map(|o| o.result.as_ref().ok())
                    .map(|e| match (horizon, scaled) {
                        (1, false) => e.h1_abs,
                        (2, false) => e.h2_abs,
                        (1, true) => e.h1_scaled,
                        (2, true) => e.h2_scaled,
                        _ => unreachable!(),
                    })
                    .collect();
                if let Ok(stats) = mae_quantiles(&errors) {
                    summary.push(SummaryRow {
                        model: model.name().to_string(),
                        horizon,
                        scaled,
                        stats,
                        n_windows: errors.len(),
                    });
                }
            }
        }
    }

    Ok(HarnessReport { outcomes, summary })
}

fn validate_config(panel: &TimePanel, config: &HarnessConfig) -> Result<()> {
    let (n, p) = (panel.n_rows(), panel.n_cols());
    if config.targets.is_empty() {
        return Err(DfmError::Invalid("harness needs at least one target".into()));
    }
    if config.models.is_empty() {
        return Err(DfmError::Invalid("harness needs at least one model".into()));
    }
    {
        let mut names: Vec<&str> = config.models.iter().map(|m| m.name()).collect();
        names.sort();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(DfmError::Invalid("model names must be distinct".into()));
        }
    }
    let mut seen = config.targets.clone();
    seen.sort_unstable();
    if seen.windows(2).any(|w| w[0] == w[1]) {
        return Err(DfmError::Invalid("target columns must be distinct".into()));
    }
    if seen.last().is_some_and(|&j| j >= p) {
        return Err(DfmError::Invalid("target index out of range".into()));
    }
    if config.lags.len() != p || config.codes.len() != p {
        return Err(DfmError::Invalid(
            "lags and codes must cover every column".into(),
        ));
    }
    for &j in &config.targets {
        if config.lags[j] != 2 {
            return Err(DfmError::Invalid(
                "the two-horizon protocol needs a publication lag of 2 on every target".into(),
            ));
        }
        if config.codes[j] != TransformCode::Diff {
            return Err(DfmError::Invalid(
                "targets must use the first-difference transform so nowcasts can be undifferenced"
                    .into(),
            ));
        }
    }
    if config.window_start < 10 {
        return Err(DfmError::Invalid(
            "window_start must leave at least 10 rows for differencing and estimation".into(),
        ));
    }
    if config.window_start > config.window_end || config.window_end >= n {
        return Err(DfmError::Invalid(format!(
            "window range {}..={} does not fit a {n}-row panel",
            config.window_start, config.window_end
        )));
    }
    if let Some(&l) = config.lags.iter().max() {
        if l >= config.window_start {
            return Err(DfmError::Invalid(
                "publication lags must be below the first window end".into(),
            ));
        }
    }
    Ok(())
}

fn diff_scale(panel: &TimePanel, col: usize, upto: usize) -> f64 {
    let mut diffs = Vec::new();
    for t in 1..=upto {
        if panel.is_observed(t, col) && panel.is_observed(t - 1, col) {
            diffs.push(panel.values()[(t, col)] - panel.values()[(t - 1, col)]);
        }
    }
    if diffs.len() < 2 {
        return 1.0;
    }
    let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (diffs.len() - 1) as f64;
    if var > 0.0 {
        var.sqrt()
    } else {
        1.0
    }
}

/// Truncates to the window, imposes the ragged edge, and transforms.
fn window_panel(panel: &TimePanel, config: &HarnessConfig, w: usize) -> Result<TimePanel> {
    let win = panel.head(w + 1)?;
    let ragged = ragged_edge(&win, &config.lags)?;
    transform_data(&ragged, &config.codes)
}

/// Fits every model on the first window and extracts the pieces needed to
/// re-apply them by smoothing only.
fn evaluate_window_fits(
    panel: &TimePanel,
    config: &HarnessConfig,
    w: usize,
) -> Result<Vec<TrainedModel>> {
    let transformed = window_panel(panel, config, w)?;
    config
        .models
        .iter()
        .map(|model| match model {
            HarnessModel::Fit { config: fc, .. } => {
                let f = fit(&transformed, fc)?;
                Ok(TrainedModel {
                    params: f.params.clone(),
                    ar1: f.ar1.clone(),
                    engine: fc.engine,
                    standardizer: fc.standardize.then(|| f.standardizer.clone()),
                })
            }
            HarnessModel::Fixed { params, engine, .. } => Ok(TrainedModel {
                params: params.clone(),
                ar1: None,
                engine: *engine,
                standardizer: None,
            }),
        })
        .collect()
}

fn apply_trained(transformed: &TimePanel, trained: &TrainedModel) -> Result<FitResult> {
    smooth_with_params(
        transformed,
        &trained.params,
        trained.ar1.as_ref(),
        trained.engine,
        trained.standardizer.as_ref(),
    )
}

/// Scores one fitted window: undifferences the fitted target differences at
/// the two missing months and compares against the true levels.
fn score_window(
    panel: &TimePanel,
    config: &HarnessConfig,
    scales: &[f64],
    w: usize,
    fitted: &FitResult,
) -> std::result::Result<WindowErrors, String> {
    let mut h1 = Vec::with_capacity(config.targets.len());
    let mut h2 = Vec::with_capacity(config.targets.len());
    let mut h1s = Vec::with_capacity(config.targets.len());
    let mut h2s = Vec::with_capacity(config.targets.len());
    for (k, &j) in config.targets.iter().enumerate() {
        for row in [w - 2, w - 1, w] {
            if !panel.is_observed(row, j) {
                return Err(format!(
                    "target column {j} is unobserved at row {row}; cannot score window {w}"
                ));
            }
        }
        let base = panel.values()[(w - 2, j)];
        let levels = undifference(
            base,
            &[
                fitted.fitted_unscaled[(w - 1, j)],
                fitted.fitted_unscaled[(w, j)],
            ],
        );
        let e1 = (levels[0] - panel.values()[(w - 1, j)]).abs();
        let e2 = (levels[1] - panel.values()[(w, j)]).abs();
        h1.push(e1);
        h2.push(e2);
        h1s.push(e1 / scales[k]);
        h2s.push(e2 / scales[k]);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(WindowErrors {
        h1_abs: mean(&h1),
        h2_abs: mean(&h2),
        h1_scaled: mean(&h1s),
        h2_scaled: mean(&h2s),
    })
}

/// Builds a level panel by cumulatively summing a simulated stationary
/// panel, for harness tests and the simulator CLI.
pub fn levels_from_differences(diffs: &TimePanel, base: &DVector<f64>) -> Result<TimePanel> {
    let (n, p) = (diffs.n_rows(), diffs.n_cols());
    if base.len() != p {
        return Err(DfmError::Invalid("base level must cover every column".into()));
    }
    if !diffs.mask().iter().all(|&m| m) {
        return Err(DfmError::Invalid(
            "difference panel must be fully observed to build levels".into(),
        ));
    }
    let mut values = nalgebra::DMatrix::zeros(n, p);
    for i in 0..p {
        let mut level = base[i];
        for t in 0..n {
            level += diffs.values()[(t, i)];
            values[(t, i)] = level;
        }
    }
    TimePanel::new(values, diffs.names().to_vec(), diffs.index().to_vec())
}
