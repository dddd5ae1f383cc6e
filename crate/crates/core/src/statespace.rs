//! Model parameter types, the AR(1) state augmentation, and seeded
//! simulators used throughout the tests.

use nalgebra::{DMatrix, DVector};
use rand_chacha::ChaCha20Rng;
use rand_core::{RngCore, SeedableRng};

use crate::data::TimePanel;
use crate::error::{DfmError, Result};
use crate::linalg::{solve_discrete_lyapunov, spectral_norm, symmetrize};

/// Idiosyncratic error process of the measurement equation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorModel {
    /// White-noise idiosyncratic errors.
    Iid,
    /// AR(1) idiosyncratic errors, handled by augmenting the state vector.
    Ar1,
}

/// Parameters of the exact dynamic factor model: loadings, factor VAR(1)
/// transition and innovation covariance, diagonal idiosyncratic variances,
/// and the initial state distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct DfmParams {
    /// `p x r` factor loadings.
    pub loadings: DMatrix<f64>,
    /// `r x r` factor VAR(1) transition.
    pub transition: DMatrix<f64>,
    /// `r x r` factor innovation covariance.
    pub state_cov: DMatrix<f64>,
    /// `p` idiosyncratic variances (the diagonal of the measurement
    /// error covariance).
    pub idio_vars: DVector<f64>,
    /// Initial state mean.
    pub init_mean: DVector<f64>,
    /// Initial state covariance.
    pub init_cov: DMatrix<f64>,
}

impl DfmParams {
    pub fn n_series(&self) -> usize {
        self.loadings.nrows()
    }

    pub fn n_factors(&self) -> usize {
        self.loadings.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let (p, r) = self.loadings.shape();
        if r == 0 || p == 0 {
            return Err(DfmError::Invalid("loadings must be non-empty".into()));
        }
        if self.transition.shape() != (r, r) {
            return Err(DfmError::Invalid("transition must be r x r".into()));
        }
        if self.state_cov.shape() != (r, r) {
            return Err(DfmError::Invalid("state covariance must be r x r".into()));
        }
        if self.idio_vars.len() != p {
            return Err(DfmError::Invalid("idio_vars must have length p".into()));
        }
        if self.init_mean.len() != r || self.init_cov.shape() != (r, r) {
            return Err(DfmError::Invalid("initial state must have dimension r".into()));
        }
        if self.idio_vars.iter().any(|&v| v <= 0.0 || v.is_nan()) {
            return Err(DfmError::Invalid(
                "idiosyncratic variances must be strictly positive".into(),
            ));
        }
        check_symmetric_psd(&self.state_cov, "state covariance")?;
        check_symmetric_psd(&self.init_cov, "initial covariance")?;
        if spectral_norm(&self.transition) >= 1.0 {
            return Err(DfmError::Invalid(
                "transition matrix must have spectral norm below 1".into(),
            ));
        }
        Ok(())
    }
}

fn check_symmetric_psd(m: &DMatrix<f64>, what: &str) -> Result<()> {
    if crate::linalg::max_abs_diff(m, &m.transpose()) > 1e-8 {
        return Err(DfmError::Invalid(format!("{what} is not symmetric")));
    }
    let eig = symmetrize(m).symmetric_eigen();
    if eig.eigenvalues.iter().any(|&v| v < -1e-8) {
        return Err(DfmError::Invalid(format!(
            "{what} is not positive semidefinite"
        )));
    }
    Ok(())
}

/// AR(1) idiosyncratic error parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Ar1Params {
    /// Per-series AR(1) coefficients, each strictly inside the unit circle.
    pub ar_coeffs: DVector<f64>,
    /// Per-series AR innovation variances.
    pub innov_vars: DVector<f64>,
    /// Small measurement jitter that keeps the augmented measurement
    /// equation non-degenerate.
    pub kappa: f64,
}

/// Default measurement jitter on standardized data.
pub const DEFAULT_KAPPA: f64 = 1e-8;

impl Ar1Params {
    pub fn validate(&self, p: usize) -> Result<()> {
        if self.ar_coeffs.len() != p || self.innov_vars.len() != p {
            return Err(DfmError::Invalid(
                "AR(1) parameter vectors must have length p".into(),
            ));
        }
        if self.ar_coeffs.iter().any(|&c| c.abs() >= 1.0) {
            return Err(DfmError::Invalid(
                "AR(1) coefficients must lie strictly inside the unit circle".into(),
            ));
        }
        if self.innov_vars.iter().any(|&v| v <= 0.0 || v.is_nan()) {
            return Err(DfmError::Invalid(
                "AR innovation variances must be strictly positive".into(),
            ));
        }
        if self.kappa <= 0.0 || self.kappa.is_nan() {
            return Err(DfmError::Invalid("kappa must be strictly positive".into()));
        }
        Ok(())
    }
}

/// The state-space system after augmenting the state with the AR(1) errors:
/// state dimension `r + p`, loadings `[Lambda | I_p]`, block-diagonal
/// transition and innovation covariance, uniform measurement jitter.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedSystem {
    /// `p x (r+p)` loadings `[Lambda | I_p]`.
    pub loadings: DMatrix<f64>,
    /// `(r+p) x (r+p)` block-diagonal transition `diag(A, diag(phi))`.
    pub transition: DMatrix<f64>,
    /// `(r+p) x (r+p)` block-diagonal innovation covariance.
    pub state_cov: DMatrix<f64>,
    /// `p` measurement variances, all equal to kappa.
    pub meas_vars: DVector<f64>,
    /// Initial augmented state mean `[alpha0; 0]`.
    pub init_mean: DVector<f64>,
    /// Initial augmented state covariance: block-diagonal with the factor
    /// initial covariance and the stationary AR(1) error variances.
    pub init_cov: DMatrix<f64>,
}

/// Builds the augmented system for AR(1) idiosyncratic errors.
pub fn build_ar1_augmented(params: &DfmParams, ar1: &Ar1Params) -> Result<AugmentedSystem> {
    params.validate()?;
    let p = params.n_series();
    let r = params.n_factors();
    ar1.validate(p)?;
    let m = r + p;

    let mut loadings = DMatrix::zeros(p, m);
    loadings.view_mut((0, 0), (p, r)).copy_from(&params.loadings);
    for i in 0..p {
        loadings[(i, r + i)] = 1.0;
    }

    let mut transition = DMatrix::zeros(m, m);
    transition
        .view_mut((0, 0), (r, r))
        .copy_from(&params.transition);
    for i in 0..p {
        transition[(r + i, r + i)] = ar1.ar_coeffs[i];
    }

    let mut state_cov = DMatrix::zeros(m, m);
    state_cov
        .view_mut((0, 0), (r, r))
        .copy_from(&params.state_cov);
    for i in 0..p {
        state_cov[(r + i, r + i)] = ar1.innov_vars[i];
    }

    let mut init_mean = DVector::zeros(m);
    init_mean.rows_mut(0, r).copy_from(&params.init_mean);
    let mut init_cov = DMatrix::zeros(m, m);
    init_cov.view_mut((0, 0), (r, r)).copy_from(&params.init_cov);
    for i in 0..p {
        init_cov[(r + i, r + i)] = ar1.innov_vars[i] / (1.0 - ar1.ar_coeffs[i].powi(2));
    }

    Ok(AugmentedSystem {
        loadings,
        transition,
        state_cov,
        meas_vars: DVector::from_element(p, ar1.kappa),
        init_mean,
        init_cov,
    })
}

/// Deterministic, portable random stream for the simulators.
///
/// Uniforms come from the high 53 bits of successive ChaCha20 64-bit words
/// (`seed_from_u64` keying), mapped into `(0, 1]`; normals use the Box-Muller
/// cosine branch, two uniforms per draw. The draw order is documented on each
/// simulator so a panel can be reproduced bit-for-bit elsewhere.
pub struct SimRng {
    rng: ChaCha20Rng,
}

impl SimRng {
    pub fn new(seed: u64) -> Self {
        SimRng {
            rng: ChaCha20Rng::seed_from_u64(seed),
        }
    }

    /// Uniform in `(0, 1]`.
    pub fn uniform(&mut self) -> f64 {
        (((self.rng.next_u64() >> 11) + 1) as f64) * (1.0 / 9007199254740992.0)
    }

    /// Standard normal via Box-Muller (cosine branch).
    pub fn normal(&mut self) -> f64 {
        let u1 = self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }
}

/// A simulated panel along with the generating parameters and factor paths.
#[derive(Debug, Clone)]
pub struct SimulatedDfm {
    pub panel: TimePanel,
    pub params: DfmParams,
    pub factors: DMatrix<f64>,
}

fn validate_sim_dims(n: usize, p: usize, r: usize, missing_frac: f64) -> Result<()> {
    if n < 10 {
        return Err(DfmError::Invalid("simulation needs n >= 10".into()));
    }
    if r == 0 || r >= p {
        return Err(DfmError::Invalid("simulation needs 1 <= r < p".into()));
    }
    if !(0.0..0.5).contains(&missing_frac) {
        return Err(DfmError::Invalid(
            "missing fraction must lie in [0, 0.5)".into(),
        ));
    }
    Ok(())
}

/// Core simulation shared by the dense and sparse designs. `loadings` is
/// already drawn; continues the stream with the initial factor, the factor
/// innovations, the measurement errors, and finally (when `missing_frac > 0`)
/// one uniform per cell in row-major order for the mask.
fn simulate_with_loadings(
    n: usize,
    p: usize,
    r: usize,
    loadings: DMatrix<f64>,
    rng: &mut SimRng,
    missing_frac: f64,
) -> Result<SimulatedDfm> {
    let transition = DMatrix::from_diagonal_element(r, r, 0.8);
    let state_cov = DMatrix::from_diagonal_element(r, r, 1.0 - 0.8 * 0.8);
    // Stationary initial distribution; diagonal transition makes this the
    // identity, but solve it in general.
    let init_cov = solve_discrete_lyapunov(&transition, &state_cov)?;
    let chol_q = state_cov
        .clone()
        .cholesky()
        .ok_or_else(|| DfmError::Numerical("state covariance not SPD".into()))?;
    let chol_p0 = init_cov
        .clone()
        .cholesky()
        .ok_or_else(|| DfmError::Numerical("initial covariance not SPD".into()))?;

    let draw = |rng: &mut SimRng, k: usize| DVector::from_fn(k, |_, _| rng.normal());

    let mut factors = DMatrix::zeros(n, r);
    let mut state = chol_p0.l() * draw(rng, r);
    for t in 0..n {
        state = &transition * state + chol_q.l() * draw(rng, r);
        factors.set_row(t, &state.transpose());
    }

    let mut values = DMatrix::zeros(n, p);
    for t in 0..n {
        for i in 0..p {
            let common: f64 = loadings.row(i).transpose().dot(&factors.row(t).transpose());
            values[(t, i)] = common + rng.normal();
        }
    }

    if missing_frac > 0.0 {
        for t in 0..n {
            for i in 0..p {
                if rng.uniform() < missing_frac {
                    values[(t, i)] = f64::NAN;
                }
            }
        }
    }

    let names = (1..=p).map(|i| format!("x{i}")).collect();
    let index = (1..=n).map(|t| t.to_string()).collect();
    let panel = TimePanel::new(values, names, index)?;
    let params = DfmParams {
        loadings,
        transition,
        state_cov,
        idio_vars: DVector::from_element(p, 1.0),
        init_mean: DVector::zeros(r),
        init_cov,
    };
    Ok(SimulatedDfm {
        panel,
        params,
        factors,
    })
}

/// Simulates an exact DFM with dense standard-normal loadings,
/// `A = 0.8 I_r`, `Sigma_u = (1 - 0.8^2) I_r`, unit idiosyncratic variances,
/// and the initial factor drawn from the stationary distribution.
///
/// Draw order: loadings row-major, initial factor, factor innovations by
/// time, measurement errors row-major, then the missing mask row-major.
pub fn simulate_dfm(
    n: usize,
    p: usize,
    r: usize,
    seed: u64,
    missing_frac: f64,
) -> Result<SimulatedDfm> {
    validate_sim_dims(n, p, r, missing_frac)?;
    let mut rng = SimRng::new(seed);
    let mut loadings = DMatrix::zeros(p, r);
    for i in 0..p {
        for j in 0..r {
            loadings[(i, j)] = rng.normal();
        }
    }
    simulate_with_loadings(n, p, r, loadings, &mut rng, missing_frac)
}

/// Simulates the block-sparse design: variables split into `r` contiguous
/// blocks, block `j` loading only on factor `j` with standard-normal
/// entries (drawn in variable order); all other loadings are exactly zero.
/// Factor dynamics and noise follow [`simulate_dfm`].
pub fn simulate_sparse_dfm(
    n: usize,
    p: usize,
    r: usize,
    seed: u64,
    missing_frac: f64,
) -> Result<SimulatedDfm> {
    validate_sim_dims(n, p, r, missing_frac)?;
    let mut rng = SimRng::new(seed);
    let mut loadings = DMatrix::zeros(p, r);
    let base = p / r;
    let rem = p % r;
    let mut start = 0;
    for j in 0..r {
        let len = base + usize::from(j < rem);
        for i in start..start + len {
            loadings[(i, j)] = rng.normal();
        }
        start += len;
    }
    simulate_with_loadings(n, p, r, loadings, &mut rng, missing_frac)
}

/// Like [`simulate_dfm`] but with AR(1) idiosyncratic errors of uniform
/// coefficient `phi` and stationary unit variance
/// (`sigma_e^2 = 1 - phi^2`). Draw order: loadings row-major, initial
/// factor, factor innovations by time, initial errors, AR innovations
/// row-major by time, then the missing mask.
pub fn simulate_dfm_ar1(
    n: usize,
    p: usize,
    r: usize,
    phi: f64,
    seed: u64,
    missing_frac: f64,
) -> Result<SimulatedDfm> {
    validate_sim_dims(n, p, r, missing_frac)?;
    if phi.abs() >= 1.0 {
        return Err(DfmError::Invalid("phi must lie inside the unit circle".into()));
    }
    let mut rng = SimRng::new(seed);
    let mut loadings = DMatrix::zeros(p, r);
    for i in 0..p {
        for j in 0..r {
            loadings[(i, j)] = rng.normal();
        }
    }

    let transition = DMatrix::from_diagonal_element(r, r, 0.8);
    let state_cov = DMatrix::from_diagonal_element(r, r, 1.0 - 0.8 * 0.8);
    let init_cov = solve_discrete_lyapunov(&transition, &state_cov)?;
    let sd_u = (1.0_f64 - 0.8 * 0.8).sqrt();

    let mut factors = DMatrix::zeros(n, r);
    let mut state = DVector::from_fn(r, |_, _| rng.normal());
    for t in 0..n {
        state = &transition * state
            + DVector::from_fn(r, |_, _| sd_u * rng.normal());
        factors.set_row(t, &state.transpose());
    }

    let sd_e = (1.0 - phi * phi).sqrt();
    let mut errs = DVector::from_fn(p, |_, _| rng.normal());
    let mut values = DMatrix::zeros(n, p);
    for t in 0..n {
        for i in 0..p {
            errs[i] = phi * errs[i] + sd_e * rng.normal();
            let common: f64 = loadings.row(i).transpose().dot(&factors.row(t).transpose());
            values[(t, i)] = common + errs[i];
        }
    }

    if missing_frac > 0.0 {
        for t in 0..n {
            for i in 0..p {
                if rng.uniform() < missing_frac {
                    values[(t, i)] = f64::NAN;
                }
            }
        }
    }

    let names = (1..=p).map(|i| format!("x{i}")).collect();
    let index = (1..=n).map(|t| t.to_string()).collect();
    let panel = TimePanel::new(values, names, index)?;
    let params = DfmParams {
        loadings,
        transition,
        state_cov,
        idio_vars: DVector::from_element(p, 1.0),
        init_mean: DVector::zeros(r),
        init_cov,
    };
    Ok(SimulatedDfm {
        panel,
        params,
        factors,
    })
}
