//! Static SVG emitters for the CLI. Plots are pure additions next to the
//! CSV outputs and never feed back into them.

use nalgebra::DMatrix;
use sparsedfm::data::TimePanel;
use sparsedfm::tuning::{AlphaPath, IcTable};

const WIDTH: f64 = 840.0;
const HEIGHT: f64 = 520.0;
const MARGIN: f64 = 50.0;

fn svg_open() -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" \
         viewBox=\"0 0 {WIDTH} {HEIGHT}\">\n\
         <rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>\n"
    )
}

fn finite_range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in values.filter(|v| v.is_finite()) {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() || !hi.is_finite() {
        (0.0, 1.0)
    } else if lo == hi {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

struct Frame {
    x_lo: f64,
    x_hi: f64,
    y_lo: f64,
    y_hi: f64,
}

impl Frame {
    fn x(&self, v: f64) -> f64 {
        MARGIN + (v - self.x_lo) / (self.x_hi - self.x_lo) * (WIDTH - 2.0 * MARGIN)
    }

    fn y(&self, v: f64) -> f64 {
        HEIGHT - MARGIN - (v - self.y_lo) / (self.y_hi - self.y_lo) * (HEIGHT - 2.0 * MARGIN)
    }

    fn axes(&self, xlabel: &str, ylabel: &str) -> String {
        let x0 = MARGIN;
        let x1 = WIDTH - MARGIN;
        let y0 = HEIGHT - MARGIN;
        let y1 = MARGIN;
        format!(
            "<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x1}\" y2=\"{y0}\" stroke=\"black\"/>\n\
             <line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x0}\" y2=\"{y1}\" stroke=\"black\"/>\n\
             <text x=\"{}\" y=\"{}\" font-size=\"13\" text-anchor=\"middle\">{xlabel}</text>\n\
             <text x=\"14\" y=\"{}\" font-size=\"13\" text-anchor=\"middle\" \
             transform=\"rotate(-90 14 {})\">{ylabel}</text>\n\
             <text x=\"{x0}\" y=\"{}\" font-size=\"11\">{:.3}</text>\n\
             <text x=\"{x1}\" y=\"{}\" font-size=\"11\" text-anchor=\"end\">{:.3}</text>\n\
             <text x=\"{}\" y=\"{y0}\" font-size=\"11\" text-anchor=\"end\">{:.3}</text>\n\
             <text x=\"{}\" y=\"{y1}\" font-size=\"11\" text-anchor=\"end\">{:.3}</text>\n",
            (x0 + x1) / 2.0,
            HEIGHT - 12.0,
            (y0 + y1) / 2.0,
            (y0 + y1) / 2.0,
            y0 + 16.0,
            self.x_lo,
            y0 + 16.0,
            self.x_hi,
            x0 - 4.0,
            self.y_lo,
            x0 - 4.0,
            self.y_hi,
        )
    }
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f",
];

fn polyline(frame: &Frame, xs: &[f64], ys: &[f64], color: &str) -> String {
    let points: Vec<String> = xs
        .iter()
        .zip(ys)
        .filter(|(_, y)| y.is_finite())
        .map(|(x, y)| format!("{:.2},{:.2}", frame.x(*x), frame.y(*y)))
        .collect();
    format!(
        "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
        points.join(" ")
    )
}

/// Heat grid of the observation mask: observed cells dark, missing light.
pub fn missing_grid(panel: &TimePanel) -> String {
    let (n, p) = (panel.n_rows(), panel.n_cols());
    let cell_w = (WIDTH - 2.0 * MARGIN) / p as f64;
    let cell_h = (HEIGHT - 2.0 * MARGIN) / n as f64;
    let mut svg = svg_open();
    for t in 0..n {
        for i in 0..p {
            let color = if panel.is_observed(t, i) {
                "#2b5797"
            } else {
                "#e6ecf5"
            };
            svg.push_str(&format!(
                "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"{color}\"/>\n",
                MARGIN + i as f64 * cell_w,
                MARGIN + t as f64 * cell_h,
                cell_w.max(0.5),
                cell_h.max(0.5),
            ));
        }
    }
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" font-size=\"13\" text-anchor=\"middle\">variables (rows = time; dark = observed)</text>\n",
        WIDTH / 2.0,
        HEIGHT - 12.0
    ));
    svg.push_str("</svg>\n");
    svg
}

/// Loadings heatmap; exact zeros stay blank.
pub fn loading_heatmap(loadings: &DMatrix<f64>, names: &[String]) -> String {
    let (p, r) = loadings.shape();
    let max_abs = loadings.iter().fold(0.0_f64, |a, v| a.max(v.abs())).max(1e-12);
    let cell_w = (WIDTH - 2.0 * MARGIN) / r as f64;
    let cell_h = (HEIGHT - 2.0 * MARGIN) / p as f64;
    let mut svg = svg_open();
    for i in 0..p {
        for j in 0..r {
            let v = loadings[(i, j)];
            if v == 0.0 {
                continue; // sparse entries render as blank squares
            }
            let strength = (v.abs() / max_abs * 255.0).round() as u8;
            let color = if v > 0.0 {
                format!("rgb({},{},255)", 255 - strength, 255 - strength)
            } else {
                format!("rgb(255,{},{})", 255 - strength, 255 - strength)
            };
            svg.push_str(&format!(
                "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"{color}\"/>\n",
                MARGIN + j as f64 * cell_w,
                MARGIN + i as f64 * cell_h,
                cell_w,
                cell_h.max(0.5),
            ));
        }
    }
    let label_step = (p / 40).max(1);
    if cell_h >= 9.0 || label_step > 1 {
        for i in (0..p).step_by(label_step) {
            svg.push_str(&format!(
                "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"8\" text-anchor=\"end\">{}</text>\n",
                MARGIN - 4.0,
                MARGIN + (i as f64 + 0.7) * cell_h,
                xml_escape(&names[i]),
            ));
        }
    }
    for j in 0..r {
        svg.push_str(&format!(
            "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"12\" text-anchor=\"middle\">F{}</text>\n",
            MARGIN + (j as f64 + 0.5) * cell_w,
            MARGIN - 8.0,
            j + 1,
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

/// Smoothed factors as line series over time.
pub fn factor_lines(factors: &DMatrix<f64>) -> String {
    let (n, r) = factors.shape();
    let (lo, hi) = finite_range(factors.iter().copied());
    let frame = Frame {
        x_lo: 0.0,
        x_hi: (n - 1).max(1) as f64,
        y_lo: lo,
        y_hi: hi,
    };
    let mut svg = svg_open();
    svg.push_str(&frame.axes("time", "factor"));
    let xs: Vec<f64> = (0..n).map(|t| t as f64).collect();
    for j in 0..r {
        let ys: Vec<f64> = (0..n).map(|t| factors[(t, j)]).collect();
        svg.push_str(&polyline(&frame, &xs, &ys, PALETTE[j % PALETTE.len()]));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-size=\"12\" fill=\"{}\">F{}</text>\n",
            WIDTH - MARGIN + 6.0,
            MARGIN + 14.0 * j as f64,
            PALETTE[j % PALETTE.len()],
            j + 1,
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

/// BIC against log10(alpha) over the completed grid points.
pub fn bic_curve(path: &AlphaPath) -> String {
    let xs: Vec<f64> = path
        .steps
        .iter()
        .filter(|s| s.bic.is_some())
        .map(|s| s.alpha.log10())
        .collect();
    let ys: Vec<f64> = path.steps.iter().filter_map(|s| s.bic).collect();
    let (x_lo, x_hi) = finite_range(xs.iter().copied());
    let (y_lo, y_hi) = finite_range(ys.iter().copied());
    let frame = Frame {
        x_lo,
        x_hi,
        y_lo,
        y_hi,
    };
    let mut svg = svg_open();
    svg.push_str(&frame.axes("log10(alpha)", "BIC"));
    svg.push_str(&polyline(&frame, &xs, &ys, PALETTE[0]));
    let opt_x = frame.x(path.alpha_opt.log10());
    svg.push_str(&format!(
        "<line x1=\"{opt_x:.2}\" y1=\"{}\" x2=\"{opt_x:.2}\" y2=\"{}\" stroke=\"{}\" stroke-dasharray=\"4 3\"/>\n",
        HEIGHT - MARGIN,
        MARGIN,
        PALETTE[1],
    ));
    svg.push_str("</svg>\n");
    svg
}

/// Information criteria curves plus the variance-explained scree bars.
pub fn ic_curves(table: &IcTable) -> String {
    let xs: Vec<f64> = table.r_values.iter().map(|&r| r as f64).collect();
    let (y_lo, y_hi) = finite_range(
        table
            .ic1
            .iter()
            .chain(table.ic2.iter())
            .chain(table.ic3.iter())
            .copied(),
    );
    let frame = Frame {
        x_lo: xs[0],
        x_hi: *xs.last().unwrap(),
        y_lo,
        y_hi,
    };
    let mut svg = svg_open();
    svg.push_str(&frame.axes("factors", "criterion"));
    for (k, (series, label)) in [
        (&table.ic1, "IC1"),
        (&table.ic2, "IC2"),
        (&table.ic3, "IC3"),
    ]
    .iter()
    .enumerate()
    {
        svg.push_str(&polyline(&frame, &xs, series, PALETTE[k]));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-size=\"12\" fill=\"{}\">{label}</text>\n",
            WIDTH - MARGIN + 6.0,
            MARGIN + 14.0 * k as f64,
            PALETTE[k],
        ));
    }
    // scree bars along the bottom band
    let band_top = HEIGHT - MARGIN + 8.0;
    let band_h = 26.0;
    let max_share = table
        .variance_shares
        .iter()
        .fold(1e-12_f64, |a, &s| a.max(s));
    let bar_w = (WIDTH - 2.0 * MARGIN) / xs.len() as f64;
    for (k, &share) in table.variance_shares.iter().enumerate() {
        let h = band_h * share / max_share;
        svg.push_str(&format!(
            "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"#8aa6c1\"/>\n",
            MARGIN + k as f64 * bar_w + 1.0,
            band_top + (band_h - h),
            (bar_w - 2.0).max(0.5),
            h,
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
