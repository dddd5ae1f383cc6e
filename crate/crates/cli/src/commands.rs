//! Subcommand implementations: argument validation, estimation calls, and
//! CSV/SVG emission.

use std::fmt;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use sparsedfm::data::{
    format_full, load_csv, missing_summary, transform_data, write_matrix_csv,
    write_missing_summary_csv, write_panel_csv, TimePanel, TransformCode,
};
use sparsedfm::error::DfmError;
use sparsedfm::kalman::{run_kfs, Engine, KfsInput};
use sparsedfm::model::{fit, predict_h, Alg, FitConfig, FitResult};
use sparsedfm::nowcast::{run_harness, HarnessConfig, HarnessModel};
use sparsedfm::statespace::{
    build_ar1_augmented, simulate_dfm, simulate_sparse_dfm, ErrorModel,
};
use sparsedfm::tuning::{logspace, tune_factors, IcType};

use crate::plot;
use crate::{Cli, Command, FitArgs, InputArgs, ModelArgs, NowcastArgs, PredictArgs, SimulateArgs, TransformArgs, TuneArgs};

/// CLI failures split by exit-code class.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Dfm(DfmError),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Dfm(e) if e.is_numerical() => 3,
            CliError::Dfm(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(msg) => write!(f, "{msg}"),
            CliError::Dfm(e) => write!(f, "{e}"),
        }
    }
}

impl From<DfmError> for CliError {
    fn from(e: DfmError) -> Self {
        CliError::Dfm(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Dfm(DfmError::Io(e))
    }
}

type CliResult = Result<(), CliError>;

pub fn dispatch(cli: Cli) -> CliResult {
    match cli.command {
        Command::Transform(args) => cmd_transform(args),
        Command::TuneFactors(args) => cmd_tune(args),
        Command::Fit(args) => cmd_fit(args),
        Command::Predict(args) => cmd_predict(args),
        Command::Simulate(args) => cmd_simulate(args),
        Command::Nowcast(args) => cmd_nowcast(args),
    }
}

fn load_input(io: &InputArgs) -> Result<TimePanel, CliError> {
    let path = io
        .input
        .as_ref()
        .ok_or_else(|| CliError::Usage("--input is required".into()))?;
    Ok(load_csv(path, io.has_index)?)
}

fn ensure_outdir(io: &InputArgs) -> Result<PathBuf, CliError> {
    std::fs::create_dir_all(&io.outdir)?;
    Ok(io.outdir.clone())
}

/// Parses "lo:hi:count" as log10 exponents, or a single numeric value.
fn parse_alphas(spec: &str) -> Result<Vec<f64>, CliError> {
    let parts: Vec<&str> = spec.split(':').collect();
    match parts.as_slice() {
        [single] => {
            let v: f64 = single
                .trim()
                .parse()
                .map_err(|_| CliError::Usage(format!("cannot parse alpha '{single}'")))?;
            if !v.is_finite() || v < 0.0 {
                return Err(CliError::Usage("alpha must be a non-negative number".into()));
            }
            Ok(vec![v])
        }
        [lo, hi, count] => {
            let lo: f64 = lo
                .trim()
                .parse()
                .map_err(|_| CliError::Usage(format!("cannot parse exponent '{lo}'")))?;
            let hi: f64 = hi
                .trim()
                .parse()
                .map_err(|_| CliError::Usage(format!("cannot parse exponent '{hi}'")))?;
            let count: usize = count
                .trim()
                .parse()
                .map_err(|_| CliError::Usage(format!("cannot parse count '{count}'")))?;
            Ok(logspace(lo, hi, count)?)
        }
        _ => Err(CliError::Usage(
            "alphas must be a single value or lo:hi:count".into(),
        )),
    }
}

fn parse_engine(s: &str) -> Result<Engine, CliError> {
    match s {
        "univariate" => Ok(Engine::Univariate),
        "multivariate" => Ok(Engine::Multivariate),
        _ => Err(CliError::Usage(format!(
            "unknown kalman engine '{s}' (expected univariate or multivariate)"
        ))),
    }
}

fn parse_err_model(s: &str) -> Result<ErrorModel, CliError> {
    match s {
        "IID" => Ok(ErrorModel::Iid),
        "AR1" => Ok(ErrorModel::Ar1),
        _ => Err(CliError::Usage(format!(
            "unknown error model '{s}' (expected IID or AR1)"
        ))),
    }
}

fn build_config(model: &ModelArgs) -> Result<FitConfig, CliError> {
    let mut config = FitConfig::new(model.r);
    config.n_unpenalized = model.q;
    config.alphas = parse_alphas(&model.alphas)?;
    config.alg = Alg::parse(&model.alg).map_err(|e| CliError::Usage(e.to_string()))?;
    config.error_model = parse_err_model(&model.err)?;
    config.engine = parse_engine(&model.kalman)?;
    config.max_iter = model.max_iter;
    config.threshold = model.threshold;
    config.standardize = !model.no_standardize;
    config.store_all_alphas = model.store_all_alphas;
    if config.error_model == ErrorModel::Ar1 && config.engine == Engine::Univariate {
        eprintln!(
            "warning: the univariate engine is slow with AR1 errors (the augmented state has r + p \
             dimensions); --kalman multivariate is the recommended pairing"
        );
    }
    Ok(config)
}

/// Reads a file of integers, one per column: comma/whitespace separated.
fn read_int_file(path: &Path, expected: usize, what: &str) -> Result<Vec<usize>, CliError> {
    let text = std::fs::read_to_string(path)?;
    let values: Result<Vec<usize>, _> = text
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<usize>())
        .collect();
    let values =
        values.map_err(|_| CliError::Dfm(DfmError::Invalid(format!("{what}: non-integer entry"))))?;
    if values.len() != expected {
        return Err(CliError::Dfm(DfmError::Invalid(format!(
            "{what}: expected {expected} entries, got {}",
            values.len()
        ))));
    }
    Ok(values)
}

fn read_codes(path: &Path, p: usize) -> Result<Vec<TransformCode>, CliError> {
    read_int_file(path, p, "transform codes")?
        .into_iter()
        .map(|c| {
            u8::try_from(c)
                .map_err(|_| DfmError::Invalid(format!("transform code {c} out of range")))
                .and_then(TransformCode::from_code)
                .map_err(CliError::from)
        })
        .collect()
}

fn factor_names(r: usize) -> Vec<String> {
    (1..=r).map(|j| format!("F{j}")).collect()
}

fn cmd_transform(args: TransformArgs) -> CliResult {
    let panel = load_input(&args.io)?;
    let outdir = ensure_outdir(&args.io)?;
    let codes = read_codes(&args.codes, panel.n_cols())?;
    let transformed = transform_data(&panel, &codes)?;
    write_panel_csv(&outdir.join("transformed.csv"), &transformed)?;
    let summary = missing_summary(&panel);
    write_missing_summary_csv(&outdir.join("missing_summary.csv"), &summary)?;
    if args.io.plot {
        std::fs::write(outdir.join("missing.svg"), plot::missing_grid(&panel))?;
    }
    Ok(())
}

fn cmd_tune(args: TuneArgs) -> CliResult {
    let panel = load_input(&args.io)?;
    let outdir = ensure_outdir(&args.io)?;
    let r_max = args.r_max.unwrap_or_else(|| 15.min(panel.n_cols() - 1));
    let ic_type = IcType::from_code(args.ic_type).map_err(|e| CliError::Usage(e.to_string()))?;
    let table = tune_factors(&panel, r_max, ic_type)?;

    let rows = table.r_values.len();
    let mut m = DMatrix::zeros(rows, 5);
    for k in 0..rows {
        m[(k, 0)] = table.v_r[k];
        m[(k, 1)] = table.ic1[k];
        m[(k, 2)] = table.ic2[k];
        m[(k, 3)] = table.ic3[k];
        m[(k, 4)] = table.variance_shares[k];
    }
    let index: Vec<String> = table.r_values.iter().map(|r| r.to_string()).collect();
    write_matrix_csv(
        &outdir.join("ic_table.csv"),
        &[
            "v_r".into(),
            "ic1".into(),
            "ic2".into(),
            "ic3".into(),
            "variance_share".into(),
        ],
        Some(("r", &index)),
        &m,
    )?;
    let chosen = DMatrix::from_column_slice(
        3,
        1,
        &[
            table.chosen[0] as f64,
            table.chosen[1] as f64,
            table.chosen[2] as f64,
        ],
    );
    write_matrix_csv(
        &outdir.join("chosen_r.csv"),
        &["r".into()],
        Some((
            "criterion",
            &["IC1".to_string(), "IC2".to_string(), "IC3".to_string()],
        )),
        &chosen,
    )?;
    if args.io.plot {
        std::fs::write(outdir.join("ic.svg"), plot::ic_curves(&table))?;
    }
    println!(
        "chosen r: IC1={} IC2={} IC3={}; IC{} picks r={}",
        table.chosen[0],
        table.chosen[1],
        table.chosen[2],
        args.ic_type,
        table.chosen()
    );
    Ok(())
}

fn print_config(config: &FitConfig) {
    println!("alg={}", config.alg.as_str());
    println!(
        "err={}",
        match config.error_model {
            ErrorModel::Iid => "IID",
            ErrorModel::Ar1 => "AR1",
        }
    );
    println!(
        "kalman={}",
        match config.engine {
            Engine::Univariate => "univariate",
            Engine::Multivariate => "multivariate",
        }
    );
    println!("r={}", config.n_factors);
    println!("q={}", config.n_unpenalized);
    println!("alphas_len={}", config.alphas.len());
    println!("alphas_first={}", format_full(config.alphas[0]));
    println!("alphas_last={}", format_full(*config.alphas.last().unwrap()));
    println!("max_iter={}", config.max_iter);
    println!("threshold={}", format_full(config.threshold));
    println!("standardize={}", config.standardize);
    println!("store_all_alphas={}", config.store_all_alphas);
}

fn cmd_fit(args: FitArgs) -> CliResult {
    let config = build_config(&args.model)?;
    if args.dump_config {
        print_config(&config);
        return Ok(());
    }
    let panel = load_input(&args.io)?;
    let outdir = ensure_outdir(&args.io)?;
    let result = fit(&panel, &config)?;
    write_fit_outputs(&outdir, &result)?;
    if args.dump_kfs {
        dump_kfs(&outdir, &panel, &result)?;
    }
    if args.io.plot {
        std::fs::write(
            outdir.join("loadings.svg"),
            plot::loading_heatmap(&result.params.loadings, &result.names),
        )?;
        std::fs::write(
            outdir.join("factors.svg"),
            plot::factor_lines(&result.factors),
        )?;
        if let Some(path) = &result.alpha_path {
            std::fs::write(outdir.join("bic.svg"), plot::bic_curve(path))?;
        }
    }
    if let Some(path) = &result.alpha_path {
        println!(
            "alpha_opt={} (grid points run: {}, total EM iterations: {})",
            format_full(path.alpha_opt),
            path.steps.len(),
            path.total_em_iterations()
        );
    }
    Ok(())
}

fn write_fit_outputs(outdir: &Path, result: &FitResult) -> CliResult {
    let r = result.params.n_factors();
    let fnames = factor_names(r);
    let index: Vec<String> = result.index.clone();
    write_matrix_csv(
        &outdir.join("factors.csv"),
        &fnames,
        Some(("index", &index)),
        &result.factors,
    )?;
    write_matrix_csv(
        &outdir.join("loadings.csv"),
        &fnames,
        Some(("series", &result.names)),
        &result.params.loadings,
    )?;
    write_matrix_csv(
        &outdir.join("A.csv"),
        &fnames,
        Some(("factor", &fnames)),
        &result.params.transition,
    )?;
    write_matrix_csv(
        &outdir.join("sigma_u.csv"),
        &fnames,
        Some(("factor", &fnames)),
        &result.params.state_cov,
    )?;
    let sigma = DMatrix::from_fn(result.params.n_series(), 1, |i, _| result.params.idio_vars[i]);
    write_matrix_csv(
        &outdir.join("sigma_eps.csv"),
        &["variance".into()],
        Some(("series", &result.names)),
        &sigma,
    )?;
    write_matrix_csv(
        &outdir.join("fitted.csv"),
        &result.names,
        Some(("index", &index)),
        &result.fitted_unscaled,
    )?;
    write_matrix_csv(
        &outdir.join("residuals.csv"),
        &result.names,
        Some(("index", &index)),
        &result.residuals,
    )?;

    // iteration log: loglik per iteration plus the relative change
    let iters = result.em_log.logliks.len();
    let mut em = DMatrix::from_element(iters.max(1), 2, f64::NAN);
    for k in 0..iters {
        em[(k, 0)] = result.em_log.logliks[k];
        if k > 0 {
            em[(k, 1)] = result.em_log.deltas[k - 1];
        }
    }
    let em_index: Vec<String> = (0..iters.max(1)).map(|k| k.to_string()).collect();
    write_matrix_csv(
        &outdir.join("emlog.csv"),
        &["loglik".into(), "delta".into()],
        Some(("iteration", &em_index)),
        &em,
    )?;

    if let Some(path) = &result.alpha_path {
        let rows = path.steps.len();
        let mut m = DMatrix::from_element(rows, 7, f64::NAN);
        for (k, s) in path.steps.iter().enumerate() {
            m[(k, 0)] = s.alpha;
            if let Some(b) = s.bic {
                m[(k, 1)] = b;
            }
            m[(k, 2)] = s.v;
            m[(k, 3)] = s.nonzero as f64;
            m[(k, 4)] = s.em_iterations as f64;
            m[(k, 5)] = f64::from(u8::from(s.em_converged));
            m[(k, 6)] = f64::from(u8::from(s.zero_column));
        }
        let idx: Vec<String> = (0..rows).map(|k| k.to_string()).collect();
        write_matrix_csv(
            &outdir.join("alpha_path.csv"),
            &[
                "alpha".into(),
                "bic".into(),
                "v".into(),
                "nonzero".into(),
                "em_iterations".into(),
                "converged".into(),
                "zero_column".into(),
            ],
            Some(("step", &idx)),
            &m,
        )?;
    }

    if let Some(ar1) = &result.ar1 {
        let p = result.params.n_series();
        let mut m = DMatrix::zeros(p, 2);
        for i in 0..p {
            m[(i, 0)] = ar1.ar_coeffs[i];
            m[(i, 1)] = ar1.innov_vars[i];
        }
        write_matrix_csv(
            &outdir.join("ar1_params.csv"),
            &["phi".into(), "sigma_e".into()],
            Some(("series", &result.names)),
            &m,
        )?;
    }
    Ok(())
}

/// Re-runs the smoother at the fitted parameters and writes the state means
/// and variance diagonals.
fn dump_kfs(outdir: &Path, panel: &TimePanel, result: &FitResult) -> CliResult {
    let scaled_values = result.standardizer.scale(panel.values());
    let scaled = panel.with_values(scaled_values)?;
    let params = &result.params;
    let output = match &result.ar1 {
        None => {
            let input = KfsInput {
                observations: scaled.values(),
                mask: scaled.mask(),
                loadings: &params.loadings,
                transition: &params.transition,
                state_cov: &params.state_cov,
                meas_vars: &params.idio_vars,
                init_mean: &params.init_mean,
                init_cov: &params.init_cov,
            };
            run_kfs(&input, result.config.engine)?
        }
        Some(ar1) => {
            let aug = build_ar1_augmented(params, ar1)?;
            let input = KfsInput {
                observations: scaled.values(),
                mask: scaled.mask(),
                loadings: &aug.loadings,
                transition: &aug.transition,
                state_cov: &aug.state_cov,
                meas_vars: &aug.meas_vars,
                init_mean: &aug.init_mean,
                init_cov: &aug.init_cov,
            };
            run_kfs(&input, result.config.engine)?
        }
    };
    let m = output.smoothed_mean.ncols();
    let n = output.smoothed_mean.nrows();
    let state_names: Vec<String> = (1..=m).map(|j| format!("s{j}")).collect();
    let index: Vec<String> = result.index.clone();
    for (name, mat) in [
        ("kfs_predicted_mean.csv", &output.predicted_mean),
        ("kfs_filtered_mean.csv", &output.filtered_mean),
        ("kfs_smoothed_mean.csv", &output.smoothed_mean),
    ] {
        write_matrix_csv(&outdir.join(name), &state_names, Some(("index", &index)), mat)?;
    }
    let mut var = DMatrix::zeros(n, m);
    for t in 0..n {
        for j in 0..m {
            var[(t, j)] = output.smoothed_cov[t][(j, j)];
        }
    }
    write_matrix_csv(
        &outdir.join("kfs_smoothed_var.csv"),
        &state_names,
        Some(("index", &index)),
        &var,
    )?;
    println!("kfs_loglik={}", format_full(output.loglik));
    Ok(())
}

fn cmd_predict(args: PredictArgs) -> CliResult {
    if args.h == 0 {
        return Err(CliError::Usage("--h must be at least 1".into()));
    }
    let config = build_config(&args.model)?;
    let panel = load_input(&args.io)?;
    let outdir = ensure_outdir(&args.io)?;
    let result = fit(&panel, &config)?;
    write_fit_outputs(&outdir, &result)?;
    let forecast = predict_h(&result, args.h)?;
    let idx: Vec<String> = (1..=args.h).map(|k| format!("+{k}")).collect();
    write_matrix_csv(
        &outdir.join("forecast_factors.csv"),
        &factor_names(result.params.n_factors()),
        Some(("step", &idx)),
        &forecast.factors,
    )?;
    write_matrix_csv(
        &outdir.join("forecast_series.csv"),
        &result.names,
        Some(("step", &idx)),
        &forecast.series_unscaled,
    )?;
    Ok(())
}

fn cmd_simulate(args: SimulateArgs) -> CliResult {
    std::fs::create_dir_all(&args.outdir)?;
    let sim = if args.sparse {
        simulate_sparse_dfm(args.n, args.p, args.r, args.seed, args.missing_frac)?
    } else {
        simulate_dfm(args.n, args.p, args.r, args.seed, args.missing_frac)?
    };
    write_panel_csv(&args.outdir.join("panel.csv"), &sim.panel)?;
    let idx: Vec<String> = (1..=args.n).map(|t| t.to_string()).collect();
    let fnames = factor_names(args.r);
    write_matrix_csv(
        &args.outdir.join("true_factors.csv"),
        &fnames,
        Some(("index", &idx)),
        &sim.factors,
    )?;
    write_matrix_csv(
        &args.outdir.join("true_loadings.csv"),
        &fnames,
        Some(("series", sim.panel.names())),
        &sim.params.loadings,
    )?;
    write_matrix_csv(
        &args.outdir.join("true_A.csv"),
        &fnames,
        Some(("factor", &fnames)),
        &sim.params.transition,
    )?;
    write_matrix_csv(
        &args.outdir.join("true_sigma_u.csv"),
        &fnames,
        Some(("factor", &fnames)),
        &sim.params.state_cov,
    )?;
    let sig = DMatrix::from_fn(args.p, 1, |i, _| sim.params.idio_vars[i]);
    write_matrix_csv(
        &args.outdir.join("true_sigma_eps.csv"),
        &["variance".into()],
        Some(("series", sim.panel.names())),
        &sig,
    )?;
    Ok(())
}

fn parse_targets(spec: &str, panel: &TimePanel) -> Result<Vec<usize>, CliError> {
    spec.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|token| {
            if let Some(pos) = panel.names().iter().position(|n| n == token) {
                Ok(pos)
            } else if let Ok(idx) = token.parse::<usize>() {
                if idx < panel.n_cols() {
                    Ok(idx)
                } else {
                    Err(CliError::Usage(format!("target index {idx} out of range")))
                }
            } else {
                Err(CliError::Usage(format!(
                    "target '{token}' is neither a column name nor an index"
                )))
            }
        })
        .collect()
}

fn cmd_nowcast(args: NowcastArgs) -> CliResult {
    let panel = load_input(&args.io)?;
    let outdir = ensure_outdir(&args.io)?;
    let p = panel.n_cols();
    let targets = parse_targets(&args.targets, &panel)?;
    let lags = read_int_file(&args.lags, p, "publication lags")?;
    let codes = match &args.codes {
        Some(path) => read_codes(path, p)?,
        None => vec![TransformCode::Diff; p],
    };
    let models: Vec<HarnessModel> = args
        .compare
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|name| {
            let mut model_args = args.model.clone();
            model_args.alg = name.to_string();
            let config = build_config(&model_args)?;
            Ok(HarnessModel::Fit {
                name: name.to_string(),
                config,
            })
        })
        .collect::<Result<_, CliError>>()?;

    let config = HarnessConfig {
        targets,
        lags,
        window_start: args.start,
        window_end: args.end,
        codes,
        models,
        reuse_params: args.reuse_params,
    };
    let report = run_harness(&panel, &config)?;

    // one numeric error file per model, plus a failure log if needed
    for model in &config.models {
        let name = model.name();
        let rows: Vec<_> = report
            .outcomes
            .iter()
            .filter(|o| o.model == name)
            .collect();
        let mut m = DMatrix::from_element(rows.len(), 4, f64::NAN);
        let mut idx = Vec::with_capacity(rows.len());
        for (k, o) in rows.iter().enumerate() {
            idx.push(o.window.to_string());
            if let Ok(e) = &o.result {
                m[(k, 0)] = e.h1_abs;
                m[(k, 1)] = e.h2_abs;
                m[(k, 2)] = e.h1_scaled;
                m[(k, 3)] = e.h2_scaled;
            }
        }
        write_matrix_csv(
            &outdir.join(format!("window_errors_{name}.csv")),
            &[
                "h1_abs".into(),
                "h2_abs".into(),
                "h1_scaled".into(),
                "h2_scaled".into(),
            ],
            Some(("window", &idx)),
            &m,
        )?;
    }
    let failures: Vec<String> = report
        .outcomes
        .iter()
        .filter_map(|o| {
            o.result
                .as_ref()
                .err()
                .map(|msg| format!("window {} model {}: {msg}", o.window, o.model))
        })
        .collect();
    if !failures.is_empty() {
        std::fs::write(outdir.join("failures.log"), failures.join("\n") + "\n")?;
    }

    let mut m = DMatrix::zeros(report.summary.len(), 7);
    let mut idx = Vec::with_capacity(report.summary.len());
    for (k, s) in report.summary.iter().enumerate() {
        idx.push(format!(
            "{}_h{}_{}",
            s.model,
            s.horizon,
            if s.scaled { "scaled" } else { "raw" }
        ));
        m[(k, 0)] = s.stats.mean;
        m[(k, 1)] = s.stats.q0;
        m[(k, 2)] = s.stats.q25;
        m[(k, 3)] = s.stats.q50;
        m[(k, 4)] = s.stats.q75;
        m[(k, 5)] = s.stats.q100;
        m[(k, 6)] = s.n_windows as f64;
    }
    write_matrix_csv(
        &outdir.join("summary.csv"),
        &[
            "mean".into(),
            "q0".into(),
            "q25".into(),
            "q50".into(),
            "q75".into(),
            "q100".into(),
            "n_windows".into(),
        ],
        Some(("cell", &idx)),
        &m,
    )?;

    for s in &report.summary {
        if !s.scaled {
            println!(
                "{} horizon {}: mean {:.4}, median {:.4} ({} windows)",
                s.model, s.horizon, s.stats.mean, s.stats.q50, s.n_windows
            );
        }
    }
    Ok(())
}
