//! Model tuning: the factor count by information criteria over PCA fits,
//! and the L1 penalty by BIC over a warm-started alpha grid.

use nalgebra::DMatrix;

use crate::data::{fill_na, standardize, TimePanel};
use crate::error::{DfmError, Result};
use crate::estimators::{em_fit, CoreFit, EmConfig, EmPenalty, WarmStart};

/// `count` points `10^x` with `x` equally spaced between `lo` and `hi`.
pub fn logspace(lo: f64, hi: f64, count: usize) -> Result<Vec<f64>> {
    if count < 2 {
        return Err(DfmError::Invalid("logspace needs at least 2 points".into()));
    }
    if lo >= hi || lo.is_nan() || hi.is_nan() {
        return Err(DfmError::Invalid(
            "logspace needs strictly increasing exponent bounds".into(),
        ));
    }
    let step = (hi - lo) / (count - 1) as f64;
    Ok((0..count)
        .map(|k| {
            let exp = if k == count - 1 { hi } else { lo + k as f64 * step };
            10f64.powf(exp)
        })
        .collect())
}

/// Which information criterion drives the factor-count choice.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IcType {
    Ic1,
    Ic2,
    Ic3,
}

impl IcType {
    pub fn from_code(code: u8) -> Result<Self> {
        Ok(match code {
            1 => IcType::Ic1,
            2 => IcType::Ic2,
            3 => IcType::Ic3,
            _ => return Err(DfmError::Invalid(format!("unknown IC type {code}"))),
        })
    }
}

/// Information criteria per candidate factor count, with the PCA residual
/// variances and the per-factor variance-explained shares.
#[derive(Debug, Clone)]
pub struct IcTable {
    pub r_values: Vec<usize>,
    /// Mean squared PCA residual per candidate `r`.
    pub v_r: Vec<f64>,
    pub ic1: Vec<f64>,
    pub ic2: Vec<f64>,
    pub ic3: Vec<f64>,
    /// Share of total variance carried by each of the leading eigenvalues.
    pub variance_shares: Vec<f64>,
    /// Chosen factor count per criterion (argmin, ties to the smaller `r`).
    pub chosen: [usize; 3],
    /// The criterion the caller asked for.
    pub requested: IcType,
}

impl IcTable {
    pub fn chosen_r(&self, ic: IcType) -> usize {
        match ic {
            IcType::Ic1 => self.chosen[0],
            IcType::Ic2 => self.chosen[1],
            IcType::Ic3 => self.chosen[2],
        }
    }

    /// Factor count under the requested criterion.
    pub fn chosen(&self) -> usize {
        self.chosen_r(self.requested)
    }
}

/// Computes the three information criteria over `r = 1..=r_max` PCA fits on
/// the interpolated, standardised panel.
pub fn tune_factors(panel: &TimePanel, r_max: usize, ic_type: IcType) -> Result<IcTable> {
    let (n, p) = (panel.n_rows(), panel.n_cols());
    if r_max == 0 || r_max >= n.min(p) {
        return Err(DfmError::Invalid(format!(
            "r_max must satisfy 1 <= r_max < min(n, p) = {}",
            n.min(p)
        )));
    }
    let (balanced, _) = fill_na(panel)?;
    let full_mask = DMatrix::from_element(n, p, true);
    let (scaled, _) = standardize(&balanced, &full_mask)?;

    // One eigendecomposition serves every candidate r.
    let cov = crate::linalg::symmetrize(&(scaled.transpose() * &scaled / n as f64));
    let eig = cov.symmetric_eigen();
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .expect("finite eigenvalues")
    });
    let total_var: f64 = eig.eigenvalues.iter().sum();

    let np = (n * p) as f64;
    let min_np = n.min(p) as f64;
    let mut v_r = Vec::with_capacity(r_max);
    let mut ic1 = Vec::with_capacity(r_max);
    let mut ic2 = Vec::with_capacity(r_max);
    let mut ic3 = Vec::with_capacity(r_max);
    let mut variance_shares = Vec::with_capacity(r_max);

    let mut basis = DMatrix::zeros(p, r_max);
    for (j, &col) in order.iter().take(r_max).enumerate() {
        basis.set_column(j, &eig.eigenvectors.column(col).into_owned());
        variance_shares.push(eig.eigenvalues[col].max(0.0) / total_var);
    }
    for r in 1..=r_max {
        let v_sub = basis.columns(0, r);
        // residual = X - X V V' for unit-norm eigenvectors
        let proj = &scaled * v_sub * v_sub.transpose();
        let resid = &scaled - proj;
        let v = resid.iter().map(|e| e * e).sum::<f64>() / np;
        v_r.push(v);
        let penalty_scale = (n + p) as f64 / np;
        ic1.push(v.ln() + r as f64 * penalty_scale * (np / (n + p) as f64).ln());
        ic2.push(v.ln() + r as f64 * penalty_scale * min_np.ln());
        ic3.push(v.ln() + r as f64 * min_np.ln() / min_np);
    }

    let argmin = |xs: &[f64]| -> usize {
        let mut best = 0;
        for (k, &v) in xs.iter().enumerate() {
            if v < xs[best] {
                best = k;
            }
        }
        best + 1
    };
    let chosen = [argmin(&ic1), argmin(&ic2), argmin(&ic3)];
    Ok(IcTable {
        r_values: (1..=r_max).collect(),
        v_r,
        ic1,
        ic2,
        ic3,
        variance_shares,
        chosen,
        requested: ic_type,
    })
}

/// `BIC = log(V) + m log(np) / (np)` for residual variance `V` and `m`
/// nonzero loadings.
pub fn bic_alpha(v: f64, m_nonzero: usize, n: usize, p: usize) -> Result<f64> {
    if v <= 0.0 || v.is_nan() {
        return Err(DfmError::Invalid(
            "BIC needs a strictly positive residual variance".into(),
        ));
    }
    let np = (n * p) as f64;
    Ok(v.ln() + m_nonzero as f64 * np.ln() / np)
}

/// One grid point of the penalty search.
#[derive(Debug, Clone)]
pub struct AlphaStep {
    pub alpha: f64,
    /// BIC of the fit; absent for the degenerate (zero-column) stop point.
    pub bic: Option<f64>,
    /// Mean squared common-component residual over observed cells.
    pub v: f64,
    /// Nonzero loading entries.
    pub nonzero: usize,
    pub em_iterations: usize,
    pub em_converged: bool,
    /// True when a whole loading column was shrunk to zero.
    pub zero_column: bool,
    /// The full fit, kept when the caller asks to store every grid point.
    pub fit: Option<CoreFit>,
}

/// The penalty path: per-alpha diagnostics, the BIC-optimal alpha, and
/// whether the sweep stopped early on a zero column.
#[derive(Debug, Clone)]
pub struct AlphaPath {
    pub steps: Vec<AlphaStep>,
    pub alpha_opt: f64,
    /// Index of the optimal step within `steps`.
    pub opt_index: usize,
    pub stopped_early: bool,
}

impl AlphaPath {
    /// Total EM iterations spent across the grid.
    pub fn total_em_iterations(&self) -> usize {
        self.steps.iter().map(|s| s.em_iterations).sum()
    }
}

/// Sweeps the alpha grid from low to high, warm-starting each EM run from
/// the previous grid point's parameters and ADMM state. Stops when a whole
/// loading column is shrunk to zero (that fit is recorded but excluded from
/// selection). BIC argmin ties break toward the larger (sparser) alpha.
/// Returns the path and the fit at the optimum (the stored sweep fit; no
/// cold refit).
pub fn alpha_grid_search(
    panel: &TimePanel,
    alphas: &[f64],
    base: &EmConfig,
    n_unpenalized: usize,
    store_all: bool,
) -> Result<(AlphaPath, CoreFit)> {
    if alphas.is_empty() {
        return Err(DfmError::Invalid("alpha grid is empty".into()));
    }
    if alphas.iter().any(|a| !a.is_finite() || *a < 0.0) {
        return Err(DfmError::Invalid(
            "alpha grid must contain non-negative finite values".into(),
        ));
    }
    let mut grid = alphas.to_vec();
    grid.sort_by(|a, b| a.partial_cmp(b).expect("finite alphas"));

    let (n, p) = (panel.n_rows(), panel.n_cols());
    let mut steps: Vec<AlphaStep> = Vec::with_capacity(grid.len());
    let mut warm: Option<WarmStart> = None;
    let mut best: Option<(usize, f64, CoreFit)> = None;
    let mut stopped_early = false;

    for (idx, &alpha) in grid.iter().enumerate() {
        let cfg = EmConfig {
            penalty: Some(EmPenalty {
                alpha,
                n_unpenalized,
            }),
            ..base.clone()
        };
        let fit = em_fit(panel, &cfg, warm.take())?;
        let loadings = &fit.params.loadings;
        let zero_column =
            (0..loadings.ncols()).any(|j| loadings.column(j).iter().all(|&v| v == 0.0));
        let nonzero = loadings.iter().filter(|&&v| v != 0.0).count();
        let v = common_component_residual_variance(panel, &fit);

        if zero_column {
            if idx == 0 {
                return Err(DfmError::Invalid(format!(
                    "the smallest alpha {alpha} already zeroes a loading column; the grid starts too high"
                )));
            }
            steps.push(AlphaStep {
                alpha,
                bic: None,
                v,
                nonzero,
                em_iterations: fit.em_log.iterations,
                em_converged: fit.em_log.converged,
                zero_column: true,
                fit: store_all.then_some(fit),
            });
            stopped_early = true;
            break;
        }

        let bic = bic_alpha(v, nonzero, n, p)?;
        let is_better = match &best {
            None => true,
            Some((_, best_bic, _)) => bic <= *best_bic,
        };
        if is_better {
            best = Some((steps.len(), bic, fit.clone()));
        }
        warm = Some(WarmStart {
            params: fit.params.clone(),
            ar1: fit.ar1.clone(),
            aug_init: fit.aug_init.clone(),
            admm: fit.admm.clone(),
        });
        steps.push(AlphaStep {
            alpha,
            bic: Some(bic),
            v,
            nonzero,
            em_iterations: fit.em_log.iterations,
            em_converged: fit.em_log.converged,
            zero_column: false,
            fit: store_all.then_some(fit),
        });
    }

    let (opt_index, _, best_fit) =
        best.ok_or_else(|| DfmError::Invalid("no admissible alpha in the grid".into()))?;
    Ok((
        AlphaPath {
            alpha_opt: steps[opt_index].alpha,
            opt_index,
            steps,
            stopped_early,
        },
        best_fit,
    ))
}

/// Mean squared residual of the common component over observed cells, on
/// the (standardised) estimation scale.
fn common_component_residual_variance(panel: &TimePanel, fit: &CoreFit) -> f64 {
    let fitted = &fit.factors * fit.params.loadings.transpose();
    let mut acc = 0.0;
    let mut count = 0usize;
    for t in 0..panel.n_rows() {
        for i in 0..panel.n_cols() {
            if panel.is_observed(t, i) {
                acc += (panel.values()[(t, i)] - fitted[(t, i)]).powi(2);
                count += 1;
            }
        }
    }
    if count == 0 {
        f64::NAN
    } else {
        acc / count as f64
    }
}
