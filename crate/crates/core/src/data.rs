//! Panel ingestion and preprocessing: CSV loading, stationarity transforms,
//! missing-data interpolation, standardisation, ragged-edge construction.
//!
//! Missing cells are NaN in the value matrix with an explicit boolean mask as
//! the source of truth, so NaN arithmetic can never silently leak into the
//! estimators.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{DfmError, Result};

/// An `n x p` observation panel: values (NaN where missing), a boolean mask
/// (`true` = observed), column names, and an ordered time index of opaque
/// labels.
#[derive(Debug, Clone, PartialEq)]
pub struct TimePanel {
    values: DMatrix<f64>,
    mask: DMatrix<bool>,
    names: Vec<String>,
    index: Vec<String>,
}

impl TimePanel {
    /// Builds a panel from a value matrix; the mask is derived from NaN cells.
    pub fn new(values: DMatrix<f64>, names: Vec<String>, index: Vec<String>) -> Result<Self> {
        let mask = DMatrix::from_fn(values.nrows(), values.ncols(), |t, i| {
            values[(t, i)].is_finite()
        });
        Self::from_parts(values, mask, names, index)
    }

    /// Builds a panel from explicit parts, checking coherence of mask,
    /// dimensions, and index labels.
    pub fn from_parts(
        values: DMatrix<f64>,
        mask: DMatrix<bool>,
        names: Vec<String>,
        index: Vec<String>,
    ) -> Result<Self> {
        let (n, p) = values.shape();
        if n < 2 || p < 1 {
            return Err(DfmError::Invalid(format!(
                "panel must have at least 2 rows and 1 column, got {n} x {p}"
            )));
        }
        if mask.shape() != (n, p) {
            return Err(DfmError::Invalid("mask shape differs from values".into()));
        }
        if names.len() != p {
            return Err(DfmError::Invalid(format!(
                "expected {p} column names, got {}",
                names.len()
            )));
        }
        if index.len() != n {
            return Err(DfmError::Invalid(format!(
                "expected {n} index labels, got {}",
                index.len()
            )));
        }
        for t in 0..n {
            for i in 0..p {
                let v = values[(t, i)];
                if mask[(t, i)] {
                    if !v.is_finite() {
                        return Err(DfmError::Invalid(format!(
                            "cell ({t},{i}) is masked observed but holds a non-finite value"
                        )));
                    }
                } else if !v.is_nan() {
                    return Err(DfmError::Invalid(format!(
                        "cell ({t},{i}) is masked missing but holds a value"
                    )));
                }
            }
        }
        // The index order is the time order; labels are opaque strings, so the
        // checkable part of "strictly ordered" is that no label repeats.
        let mut seen = index.clone();
        seen.sort();
        if seen.windows(2).any(|w| w[0] == w[1]) {
            return Err(DfmError::Invalid("time index labels must be distinct".into()));
        }
        Ok(Self {
            values,
            mask,
            names,
            index,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_cols(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn mask(&self) -> &DMatrix<bool> {
        &self.mask
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn index(&self) -> &[String] {
        &self.index
    }

    pub fn is_observed(&self, t: usize, i: usize) -> bool {
        self.mask[(t, i)]
    }

    /// Panel truncated to the first `rows` rows.
    pub fn head(&self, rows: usize) -> Result<TimePanel> {
        if rows < 2 || rows > self.n_rows() {
            return Err(DfmError::Invalid(format!(
                "cannot truncate a {}-row panel to {rows} rows",
                self.n_rows()
            )));
        }
        TimePanel::from_parts(
            self.values.rows(0, rows).into_owned(),
            self.mask.rows(0, rows).into_owned(),
            self.names.clone(),
            self.index[..rows].to_vec(),
        )
    }

    /// Replaces the values of a panel, keeping mask/names/index. The new
    /// values must be observed exactly where the mask is true.
    pub fn with_values(&self, values: DMatrix<f64>) -> Result<TimePanel> {
        TimePanel::from_parts(values, self.mask.clone(), self.names.clone(), self.index.clone())
    }
}

/// Per-column stationarity transform.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransformCode {
    /// 1: no change
    None,
    /// 2: first difference
    Diff,
    /// 3: second difference
    DiffTwice,
    /// 4: log first difference
    LogDiff,
    /// 5: log second difference
    LogDiffTwice,
    /// 6: growth rate `(x_t - x_{t-1}) / x_{t-1}`
    Growth,
    /// 7: log growth rate `log(x_t) - log(x_{t-1})`
    LogGrowth,
}

impl TransformCode {
    pub fn from_code(code: u8) -> Result<Self> {
        Ok(match code {
            1 => TransformCode::None,
            2 => TransformCode::Diff,
            3 => TransformCode::DiffTwice,
            4 => TransformCode::LogDiff,
            5 => TransformCode::LogDiffTwice,
            6 => TransformCode::Growth,
            7 => TransformCode::LogGrowth,
            _ => return Err(DfmError::Invalid(format!("unknown transform code {code}"))),
        })
    }

    pub fn code(self) -> u8 {
        match self {
            TransformCode::None => 1,
            TransformCode::Diff => 2,
            TransformCode::DiffTwice => 3,
            TransformCode::LogDiff => 4,
            TransformCode::LogDiffTwice => 5,
            TransformCode::Growth => 6,
            TransformCode::LogGrowth => 7,
        }
    }

    fn needs_log(self) -> bool {
        matches!(
            self,
            TransformCode::LogDiff | TransformCode::LogDiffTwice | TransformCode::LogGrowth
        )
    }
}

/// Per-column means and standard deviations computed over observed cells.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub means: DVector<f64>,
    pub sds: DVector<f64>,
}

impl Standardizer {
    /// A no-op standardizer (zero means, unit sds).
    pub fn identity(p: usize) -> Self {
        Standardizer {
            means: DVector::zeros(p),
            sds: DVector::from_element(p, 1.0),
        }
    }

    /// `(x - mean) / sd` column-wise; NaN passes through.
    pub fn scale(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(m.nrows(), m.ncols(), |t, i| {
            (m[(t, i)] - self.means[i]) / self.sds[i]
        })
    }

    /// `x * sd + mean` column-wise; NaN passes through.
    pub fn unscale(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(m.nrows(), m.ncols(), |t, i| {
            m[(t, i)] * self.sds[i] + self.means[i]
        })
    }
}

/// Loads a comma-separated panel. The header row is mandatory; cells equal to
/// `NA` or the empty string (after trimming) are missing; everything else
/// must parse as a real number. With `has_index`, the first column provides
/// the time labels and is excluded from the value columns; otherwise rows are
/// labelled "1".."n".
pub fn load_csv(path: &Path, has_index: bool) -> Result<TimePanel> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(csv_to_err)?;

    let headers: Vec<String> = reader
        .headers()
        .map_err(csv_to_err)?
        .iter()
        .map(|s| s.to_string())
        .collect();
    if headers.is_empty() {
        return Err(DfmError::Invalid("empty header row".into()));
    }
    let names: Vec<String> = if has_index {
        headers[1..].to_vec()
    } else {
        headers.clone()
    };
    if names.is_empty() {
        return Err(DfmError::Invalid(
            "no value columns (only an index column present)".into(),
        ));
    }
    {
        let mut sorted = names.clone();
        sorted.sort();
        if let Some(w) = sorted.windows(2).find(|w| w[0] == w[1]) {
            return Err(DfmError::Invalid(format!("duplicate column name '{}'", w[0])));
        }
    }

    let mut index = Vec::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (row_no, record) in reader.records().enumerate() {
        let record = record.map_err(csv_to_err)?;
        let fields: Vec<&str> = record.iter().collect();
        let value_fields = if has_index {
            index.push(fields[0].to_string());
            &fields[1..]
        } else {
            index.push((row_no + 1).to_string());
            &fields[..]
        };
        let mut row = Vec::with_capacity(value_fields.len());
        for (i, cell) in value_fields.iter().enumerate() {
            if cell.is_empty() || *cell == "NA" {
                row.push(f64::NAN);
            } else {
                let v: f64 = cell.parse().map_err(|_| DfmError::Parse {
                    row: row_no + 1,
                    column: names[i].clone(),
                    message: format!("cannot parse '{cell}' as a number"),
                })?;
                if v.is_nan() {
                    row.push(f64::NAN);
                } else {
                    row.push(v);
                }
            }
        }
        rows.push(row);
    }

    let n = rows.len();
    let p = names.len();
    if n < 2 {
        return Err(DfmError::Invalid(format!(
            "panel needs at least 2 data rows, got {n}"
        )));
    }
    let values = DMatrix::from_fn(n, p, |t, i| rows[t][i]);
    TimePanel::new(values, names, index)
}

fn csv_to_err(e: csv::Error) -> DfmError {
    match e.kind() {
        csv::ErrorKind::UnequalLengths { pos, expected_len, len } => DfmError::Invalid(format!(
            "non-rectangular file: record{} has {len} fields, expected {expected_len}",
            pos.as_ref()
                .map(|p| format!(" at line {}", p.line()))
                .unwrap_or_default()
        )),
        _ => DfmError::Invalid(format!("csv error: {e}")),
    }
}

/// Applies a stationarity transform per column. Output dimensions match the
/// input; rows consumed by differencing become missing, and missing inputs
/// propagate to every output cell that references them.
pub fn transform_data(panel: &TimePanel, codes: &[TransformCode]) -> Result<TimePanel> {
    let (n, p) = (panel.n_rows(), panel.n_cols());
    if codes.len() != p {
        return Err(DfmError::Invalid(format!(
            "expected {p} transform codes, got {}",
            codes.len()
        )));
    }
    let mut out = DMatrix::from_element(n, p, f64::NAN);
    for i in 0..p {
        let code = codes[i];
        let cell = |t: usize| -> Option<f64> {
            if panel.is_observed(t, i) {
                Some(panel.values()[(t, i)])
            } else {
                None
            }
        };
        if code.needs_log() {
            for t in 0..n {
                if let Some(v) = cell(t) {
                    if v <= 0.0 {
                        return Err(DfmError::Column {
                            column: panel.names()[i].clone(),
                            message: format!(
                                "non-positive value {v} at row {} under a log transform",
                                t + 1
                            ),
                        });
                    }
                }
            }
        }
        let lagged = |t: usize, lag: usize| -> Option<f64> {
            if t < lag {
                None
            } else {
                cell(t - lag)
            }
        };
        for t in 0..n {
            let value = match code {
                TransformCode::None => cell(t),
                TransformCode::Diff => match (cell(t), lagged(t, 1)) {
                    (Some(a), Some(b)) => Some(a - b),
                    _ => None,
                },
                TransformCode::DiffTwice => match (cell(t), lagged(t, 1), lagged(t, 2)) {
                    (Some(a), Some(b), Some(c)) => Some(a - 2.0 * b + c),
                    _ => None,
                },
                TransformCode::LogDiff | TransformCode::LogGrowth => {
                    match (cell(t), lagged(t, 1)) {
                        (Some(a), Some(b)) => Some(a.ln() - b.ln()),
                        _ => None,
                    }
                }
                TransformCode::LogDiffTwice => match (cell(t), lagged(t, 1), lagged(t, 2)) {
                    (Some(a), Some(b), Some(c)) => Some(a.ln() - 2.0 * b.ln() + c.ln()),
                    _ => None,
                },
                TransformCode::Growth => match (cell(t), lagged(t, 1)) {
                    (Some(a), Some(b)) => {
                        if b == 0.0 {
                            return Err(DfmError::Column {
                                column: panel.names()[i].clone(),
                                message: format!("growth rate divides by zero at row {}", t + 1),
                            });
                        }
                        Some((a - b) / b)
                    }
                    _ => None,
                },
            };
            if let Some(v) = value {
                out[(t, i)] = v;
            }
        }
    }
    TimePanel::new(out, panel.names().to_vec(), panel.index().to_vec())
}

/// Interpolates missing cells to produce a balanced matrix. Internal gaps are
/// filled by a natural cubic spline through the column's observed points;
/// leading/trailing runs are filled with the column median and those filled
/// cells are then smoothed with a centred MA(3) (window shrunk at the series
/// ends). Returns the balanced matrix and the original observation mask, so
/// fills stay flagged as imputed.
pub fn fill_na(panel: &TimePanel) -> Result<(DMatrix<f64>, DMatrix<bool>)> {
    let (n, p) = (panel.n_rows(), panel.n_cols());
    let mut out = panel.values().clone();
    for i in 0..p {
        let obs: Vec<usize> = (0..n).filter(|&t| panel.is_observed(t, i)).collect();
        if obs.len() < 2 {
            return Err(DfmError::Column {
                column: panel.names()[i].clone(),
                message: format!(
                    "needs at least 2 observed values to interpolate, got {}",
                    obs.len()
                ),
            });
        }
        let xs: Vec<f64> = obs.iter().map(|&t| t as f64).collect();
        let ys: Vec<f64> = obs.iter().map(|&t| panel.values()[(t, i)]).collect();
        let spline = NaturalSpline::fit(&xs, &ys);
        let first = obs[0];
        let last = *obs.last().unwrap();
        for t in first..=last {
            if !panel.is_observed(t, i) {
                out[(t, i)] = spline.eval(t as f64);
            }
        }
        if first > 0 || last < n - 1 {
            let median = median_of(&ys);
            for t in 0..first {
                out[(t, i)] = median;
            }
            for t in (last + 1)..n {
                out[(t, i)] = median;
            }
            // MA(3) over the median-filled series, written back only into the
            // boundary fills; window members come from the pre-smoothing pass.
            let col: Vec<f64> = (0..n).map(|t| out[(t, i)]).collect();
            let smooth = |t: usize| -> f64 {
                let lo = t.saturating_sub(1);
                let hi = (t + 1).min(n - 1);
                let w = &col[lo..=hi];
                w.iter().sum::<f64>() / w.len() as f64
            };
            for t in 0..first {
                out[(t, i)] = smooth(t);
            }
            for t in (last + 1)..n {
                out[(t, i)] = smooth(t);
            }
        }
    }
    Ok((out, panel.mask().clone()))
}

fn median_of(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let k = s.len();
    if k % 2 == 1 {
        s[k / 2]
    } else {
        0.5 * (s[k / 2 - 1] + s[k / 2])
    }
}

/// Natural cubic spline (zero second derivative at the boundary knots)
/// through strictly increasing knots. Two knots degrade to a line.
struct NaturalSpline {
    xs: Vec<f64>,
    ys: Vec<f64>,
    second: Vec<f64>,
}

impl NaturalSpline {
    fn fit(xs: &[f64], ys: &[f64]) -> Self {
        let k = xs.len();
        assert!(k >= 2, "spline needs at least 2 knots");
        let mut second = vec![0.0; k];
        if k > 2 {
            // Tridiagonal system for the interior second derivatives
            // (Thomas algorithm).
            let m = k - 2;
            let mut diag = vec![0.0; m];
            let mut sub = vec![0.0; m];
            let mut sup = vec![0.0; m];
            let mut rhs = vec![0.0; m];
            for j in 0..m {
                let h0 = xs[j + 1] - xs[j];
                let h1 = xs[j + 2] - xs[j + 1];
                sub[j] = h0;
                diag[j] = 2.0 * (h0 + h1);
                sup[j] = h1;
                rhs[j] = 6.0 * ((ys[j + 2] - ys[j + 1]) / h1 - (ys[j + 1] - ys[j]) / h0);
            }
            for j in 1..m {
                let w = sub[j] / diag[j - 1];
                diag[j] -= w * sup[j - 1];
                rhs[j] -= w * rhs[j - 1];
            }
            second[m] = rhs[m - 1] / diag[m - 1];
            for j in (0..m - 1).rev() {
                second[j + 1] = (rhs[j] - sup[j] * second[j + 2]) / diag[j];
            }
        }
        NaturalSpline {
            xs: xs.to_vec(),
            ys: ys.to_vec(),
            second,
        }
    }

    fn eval(&self, x: f64) -> f64 {
        let k = self.xs.len();
        let mut seg = k - 2;
        for j in 0..k - 1 {
            if x <= self.xs[j + 1] {
                seg = j;
                break;
            }
        }
        let (x0, x1) = (self.xs[seg], self.xs[seg + 1]);
        let (y0, y1) = (self.ys[seg], self.ys[seg + 1]);
        let (m0, m1) = (self.second[seg], self.second[seg + 1]);
        let h = x1 - x0;
        m0 * (x1 - x).powi(3) / (6.0 * h)
            + m1 * (x - x0).powi(3) / (6.0 * h)
            + (y0 / h - m0 * h / 6.0) * (x1 - x)
            + (y1 / h - m1 * h / 6.0) * (x - x0)
    }
}

/// Standardises each column over its observed cells (sd with the
/// `n_obs - 1` denominator). Missing cells stay missing.
pub fn standardize(
    values: &DMatrix<f64>,
    mask: &DMatrix<bool>,
) -> Result<(DMatrix<f64>, Standardizer)> {
    let (n, p) = values.shape();
    if mask.shape() != (n, p) {
        return Err(DfmError::Invalid("mask shape differs from values".into()));
    }
    let mut means = DVector::zeros(p);
    let mut sds = DVector::zeros(p);
    for i in 0..p {
        let obs: Vec<f64> = (0..n)
            .filter(|&t| mask[(t, i)])
            .map(|t| values[(t, i)])
            .collect();
        if obs.len() < 2 {
            return Err(DfmError::Column {
                column: format!("{i}"),
                message: format!("needs at least 2 observed cells, got {}", obs.len()),
            });
        }
        let mean = obs.iter().sum::<f64>() / obs.len() as f64;
        let var = obs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (obs.len() - 1) as f64;
        let sd = var.sqrt();
        if sd <= 0.0 || !sd.is_finite() {
            return Err(DfmError::Column {
                column: format!("{i}"),
                message: "zero variance over observed cells".into(),
            });
        }
        means[i] = mean;
        sds[i] = sd;
    }
    let std = Standardizer { means, sds };
    Ok((std.scale(values), std))
}

/// Masks the final `lags[i]` rows of column `i`.
pub fn ragged_edge(panel: &TimePanel, lags: &[usize]) -> Result<TimePanel> {
    let (n, p) = (panel.n_rows(), panel.n_cols());
    if lags.len() != p {
        return Err(DfmError::Invalid(format!(
            "expected {p} lags, got {}",
            lags.len()
        )));
    }
    if let Some((i, &l)) = lags.iter().enumerate().find(|(_, &l)| l >= n) {
        return Err(DfmError::Invalid(format!(
            "lag {l} for column '{}' is not below the row count {n}",
            panel.names()[i]
        )));
    }
    let mut values = panel.values().clone();
    let mut mask = panel.mask().clone();
    for i in 0..p {
        for t in (n - lags[i])..n {
            values[(t, i)] = f64::NAN;
            mask[(t, i)] = false;
        }
    }
    TimePanel::from_parts(values, mask, panel.names().to_vec(), panel.index().to_vec())
}

/// One line of the missing-data summary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MissingSummaryRow {
    pub name: String,
    pub missing: usize,
    /// Number of maximal consecutive missing stretches.
    pub runs: usize,
}

/// Per-column missing counts and run counts.
pub fn missing_summary(panel: &TimePanel) -> Vec<MissingSummaryRow> {
    (0..panel.n_cols())
        .map(|i| {
            let mut missing = 0;
            let mut runs = 0;
            let mut in_run = false;
            for t in 0..panel.n_rows() {
                if !panel.is_observed(t, i) {
                    missing += 1;
                    if !in_run {
                        runs += 1;
                        in_run = true;
                    }
                } else {
                    in_run = false;
                }
            }
            MissingSummaryRow {
                name: panel.names()[i].clone(),
                missing,
                runs,
            }
        })
        .collect()
}

/// Formats a value with 17 significant digits (lossless f64 round-trip);
/// NaN becomes the missing marker `NA`.
pub fn format_full(v: f64) -> String {
    if v.is_nan() {
        "NA".to_string()
    } else {
        format!("{v:.16e}")
    }
}

/// Writes a matrix as CSV: mandatory header, optional index column, values
/// at full precision, NaN as `NA`.
pub fn write_matrix_csv(
    path: &Path,
    col_names: &[String],
    index: Option<(&str, &[String])>,
    m: &DMatrix<f64>,
) -> Result<()> {
    if col_names.len() != m.ncols() {
        return Err(DfmError::Invalid(format!(
            "expected {} column names, got {}",
            m.ncols(),
            col_names.len()
        )));
    }
    let mut w = csv::Writer::from_path(path).map_err(csv_to_err)?;
    let mut header: Vec<String> = Vec::new();
    if let Some((label, idx)) = index {
        if idx.len() != m.nrows() {
            return Err(DfmError::Invalid("index length differs from row count".into()));
        }
        header.push(label.to_string());
    }
    header.extend(col_names.iter().cloned());
    w.write_record(&header).map_err(csv_to_err)?;
    for t in 0..m.nrows() {
        let mut rec: Vec<String> = Vec::with_capacity(header.len());
        if let Some((_, idx)) = index {
            rec.push(idx[t].clone());
        }
        for i in 0..m.ncols() {
            rec.push(format_full(m[(t, i)]));
        }
        w.write_record(&rec).map_err(csv_to_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes a panel as CSV with its index column first.
pub fn write_panel_csv(path: &Path, panel: &TimePanel) -> Result<()> {
    write_matrix_csv(
        path,
        panel.names(),
        Some(("index", panel.index())),
        panel.values(),
    )
}

/// Writes the missing-data summary as CSV.
pub fn write_missing_summary_csv(path: &Path, rows: &[MissingSummaryRow]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "column,missing,runs")?;
    for r in rows {
        writeln!(f, "{},{},{}", escape_csv(&r.name), r.missing, r.runs)?;
    }
    Ok(())
}

fn escape_csv(s: &str) -> String {
    if s.contains(',') || s.contains('"') || s.contains('\n') {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}
