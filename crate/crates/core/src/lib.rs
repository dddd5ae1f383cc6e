//! Dynamic factor models for multivariate time series, with optional
//! L1-regularised (sparse) factor loadings.
//!
//! The model is the exact dynamic factor model: `p` observed series load on
//! `r << p` latent factors that follow a stationary VAR(1), with diagonal
//! idiosyncratic noise (IID or AR(1)). Four estimation strategies are
//! provided behind one front door, [`model::fit`]:
//!
//! * `PCA` — static principal-components factors,
//! * `2Stage` — PCA initialisation plus one Kalman smoother pass,
//! * `EM` — quasi-maximum likelihood via the EM algorithm, with arbitrary
//!   missing-data patterns handled in the M step,
//! * `EM-sparse` — the EM algorithm with an L1 penalty on the loadings,
//!   solved by ADMM inside each M step and tuned by BIC over an alpha grid.
//!
//! Supporting modules: [`data`] ingests and transforms CSV panels, [`kalman`]
//! holds both the multivariate and the sequential univariate filter/smoother,
//! [`tuning`] selects the factor count and the penalty, and [`nowcast`] runs
//! a pseudo real-time expanding-window nowcasting exercise.

pub mod data;
pub mod error;
pub mod estimators;
pub mod kalman;
pub mod linalg;
pub mod model;
pub mod nowcast;
pub mod sparse_admm;
pub mod statespace;
pub mod tuning;

pub use data::{Standardizer, TimePanel, TransformCode};
pub use error::{DfmError, Result};
pub use kalman::Engine;
pub use model::{fit, predict_h, Alg, FitConfig, FitResult, Forecast};
pub use statespace::{Ar1Params, DfmParams, ErrorModel};
pub use tuning::{logspace, tune_factors, IcType};
