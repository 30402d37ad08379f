//! Minimal SVG line plots for traces. Pure viewer: consumes already-emitted
//! CSVs and renders static files; nothing here feeds back into the pipeline.

use anyhow::{bail, Context, Result};

pub struct Series {
    pub label: String,
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
}

const W: f64 = 860.0;
const H: f64 = 520.0;
const MARGIN: f64 = 60.0;

/// Render one or more series as an SVG line chart. Y values are plotted on a
/// log10 axis when all are positive and span more than two decades.
pub fn render_svg(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> Result<String> {
    if series.is_empty() || series.iter().all(|s| s.xs.is_empty()) {
        bail!("nothing to plot");
    }
    let all_y: Vec<f64> = series.iter().flat_map(|s| s.ys.iter().cloned()).collect();
    let positive = all_y.iter().all(|&y| y > 0.0);
    let (y_min_raw, y_max_raw) = min_max(&all_y);
    let log_scale = positive && y_max_raw / y_min_raw.max(f64::MIN_POSITIVE) > 100.0;
    let ty = |y: f64| if log_scale { y.log10() } else { y };

    let xs_all: Vec<f64> = series.iter().flat_map(|s| s.xs.iter().cloned()).collect();
    let (x_min, x_max) = min_max(&xs_all);
    let (y_min, y_max) = min_max(&all_y.iter().map(|&y| ty(y)).collect::<Vec<_>>());
    let x_span = (x_max - x_min).max(1e-12);
    let y_span = (y_max - y_min).max(1e-12);

    let px = |x: f64| MARGIN + (x - x_min) / x_span * (W - 2.0 * MARGIN);
    let py = |y: f64| H - MARGIN - (ty(y) - y_min) / y_span * (H - 2.0 * MARGIN);

    let palette = [
        "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
    ];
    let mut out = String::new();
    out.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n"
    ));
    out.push_str(&format!(
        "<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n<text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-size=\"16\">{}</text>\n",
        W / 2.0,
        escape(title)
    ));
    // Axes.
    out.push_str(&format!(
        "<line x1=\"{m}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n<line x1=\"{m}\" y1=\"{t}\" x2=\"{m}\" y2=\"{b}\" stroke=\"black\"/>\n",
        m = MARGIN,
        b = H - MARGIN,
        r = W - MARGIN,
        t = MARGIN
    ));
    out.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-size=\"12\">{}</text>\n",
        W / 2.0,
        H - 14.0,
        escape(x_label)
    ));
    let y_title = if log_scale {
        format!("log10 {y_label}")
    } else {
        y_label.to_string()
    };
    out.push_str(&format!(
        "<text x=\"16\" y=\"{}\" text-anchor=\"middle\" font-size=\"12\" transform=\"rotate(-90 16 {})\">{}</text>\n",
        H / 2.0,
        H / 2.0,
        escape(&y_title)
    ));
    // Tick labels at the corners.
    out.push_str(&format!(
        "<text x=\"{m}\" y=\"{}\" font-size=\"10\">{:.3}</text>\n<text x=\"{m}\" y=\"{}\" font-size=\"10\">{:.3}</text>\n",
        H - MARGIN + 14.0,
        x_min,
        MARGIN - 6.0,
        y_max,
        m = MARGIN
    ));
    out.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"end\" font-size=\"10\">{:.3}</text>\n",
        W - MARGIN,
        H - MARGIN + 14.0,
        x_max
    ));

    for (i, s) in series.iter().enumerate() {
        if s.xs.is_empty() {
            continue;
        }
        let color = palette[i % palette.len()];
        let pts: Vec<String> =
            s.xs.iter()
                .zip(&s.ys)
                .map(|(&x, &y)| format!("{:.2},{:.2}", px(x), py(y)))
                .collect();
        out.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
            pts.join(" ")
        ));
        out.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-size=\"12\" fill=\"{color}\">{}</text>\n",
            W - MARGIN - 180.0,
            MARGIN + 16.0 * (i as f64 + 1.0),
            escape(&s.label)
        ));
    }
    out.push_str("</svg>\n");
    Ok(out)
}

fn min_max(v: &[f64]) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &x in v {
        lo = lo.min(x);
        hi = hi.max(x);
    }
    (lo, hi)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

/// A parsed CSV trace: header names and numeric columns (empty cells NaN).
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

pub fn parse_csv(text: &str) -> Result<Table> {
    let mut lines = text.lines();
    let header = lines.next().context("empty trace")?;
    let columns: Vec<String> = header.split(',').map(|c| c.to_string()).collect();
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != columns.len() {
            bail!(
                "row {} has {} fields, expected {}",
                i + 2,
                fields.len(),
                columns.len()
            );
        }
        let row: Vec<f64> = fields
            .iter()
            .map(|f| {
                if f.is_empty() || *f == "true" {
                    if *f == "true" {
                        1.0
                    } else {
                        f64::NAN
                    }
                } else if *f == "false" {
                    0.0
                } else {
                    f.parse().unwrap_or(f64::NAN)
                }
            })
            .collect();
        rows.push(row);
    }
    if rows.is_empty() {
        bail!("trace has a header but no rows");
    }
    Ok(Table { columns, rows })
}

impl Table {
    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let idx = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r[idx]).collect())
    }

    pub fn columns_with_prefix(&self, prefix: &str) -> Vec<(String, Vec<f64>)> {
        self.columns
            .iter()
            .enumerate()
            .filter(|(_, c)| c.starts_with(prefix))
            .map(|(i, c)| (c.clone(), self.rows.iter().map(|r| r[i]).collect()))
            .collect()
    }
}
