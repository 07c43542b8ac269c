//! CSV and SVG line charts from metrics streams.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{CoevoError, Result};
use crate::io::metrics::MetricsRecord;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 360.0;
const MARGIN: f64 = 48.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

type Series = Vec<(f64, f64)>;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// `(kind, metric) → [(step, value)]` for one run.
pub fn collect_series(records: &[MetricsRecord]) -> BTreeMap<(String, String), Series> {
    let mut out: BTreeMap<(String, String), Series> = BTreeMap::new();
    for r in records {
        for (name, &v) in &r.values {
            if v.is_finite() {
                out.entry((r.kind.clone(), name.clone()))
                    .or_default()
                    .push((r.step as f64, v));
            }
        }
    }
    out
}

/// A line chart with one polyline per series and an optional dashed horizontal reference.
pub fn line_chart(title: &str, series: &[(String, Series)], baseline: Option<f64>) -> String {
    let points = series.iter().flat_map(|(_, s)| s.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in points {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if let Some(b) = baseline {
        y0 = y0.min(b);
        y1 = y1.max(b);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 - x0 < 1e-12 {
        x1 = x0 + 1.0;
    }
    if y1 - y0 < 1e-12 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    let sx = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (WIDTH - 2.0 * MARGIN);
    let sy = |y: f64| HEIGHT - MARGIN - (y - y0) / (y1 - y0) * (HEIGHT - 2.0 * MARGIN);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="20" text-anchor="middle" font-family="sans-serif" font-size="14">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    );
    let _ = writeln!(
        svg,
        r#"<g class="axes" stroke="black"><line x1="{m}" y1="{b}" x2="{r}" y2="{b}"/><line x1="{m}" y1="{t}" x2="{m}" y2="{b}"/></g>"#,
        m = MARGIN,
        b = HEIGHT - MARGIN,
        r = WIDTH - MARGIN,
        t = MARGIN
    );
    let _ = writeln!(
        svg,
        r#"<g font-family="sans-serif" font-size="10"><text x="{m}" y="{ty}">{x0}</text><text x="{r}" y="{ty}" text-anchor="end">{x1}</text><text x="4" y="{yb}">{y0:.4}</text><text x="4" y="{yt}">{y1:.4}</text></g>"#,
        m = MARGIN,
        r = WIDTH - MARGIN,
        ty = HEIGHT - MARGIN + 16.0,
        yb = HEIGHT - MARGIN,
        yt = MARGIN + 4.0,
    );
    if let Some(b) = baseline {
        let _ = writeln!(
            svg,
            r##"<line class="baseline" x1="{}" y1="{y:.3}" x2="{}" y2="{y:.3}" stroke="#555" stroke-dasharray="6 4"/>"##,
            MARGIN,
            WIDTH - MARGIN,
            y = sy(b)
        );
    }
    for (i, (label, s)) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let pts: Vec<String> = s.iter().map(|&(x, y)| format!("{:.3},{:.3}", sx(x), sy(y))).collect();
        let _ = writeln!(
            svg,
            r#"<polyline class="series" fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            pts.join(" ")
        );
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" font-family="sans-serif" font-size="11" fill="{color}">{}</text>"#,
            WIDTH - MARGIN - 120.0,
            MARGIN + 14.0 * (i as f64 + 1.0),
            escape(label)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| CoevoError::io(path, e))
}

fn file_stem(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

/// Writes per-metric CSV/SVG files for each labelled run plus `shift_kl.svg`,
/// which overlays every run's probe KL with the real-data baseline.
pub fn emit_plots(runs: &[(String, Vec<MetricsRecord>)], out_dir: &Path) -> Result<Vec<PathBuf>> {
    if runs.is_empty() || runs.iter().all(|(_, r)| r.is_empty()) {
        return Err(CoevoError::invalid("no metrics to plot"));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| CoevoError::io(out_dir, e))?;
    let mut written = Vec::new();
    let mut overlay = Vec::new();
    let mut baseline = None;
    for (label, records) in runs {
        let series = collect_series(records);
        for ((kind, metric), s) in &series {
            let stem = file_stem(&format!("{label}.{kind}.{metric}"));
            let csv_path = out_dir.join(format!("{stem}.csv"));
            let mut csv = String::from("step,value\n");
            for (x, y) in s {
                let _ = writeln!(csv, "{x},{y}");
            }
            write(&csv_path, &csv)?;
            let svg_path = out_dir.join(format!("{stem}.svg"));
            write(&svg_path, &line_chart(&format!("{label}: {kind} {metric}"), &[(label.clone(), s.clone())], None))?;
            written.push(csv_path);
            written.push(svg_path);
        }
        if let Some(s) = series.get(&("shift_probe".to_string(), "kl_nats".to_string())) {
            overlay.push((label.clone(), s.clone()));
        }
        if baseline.is_none() {
            baseline = records
                .iter()
                .find(|r| r.kind == "shift_probe")
                .and_then(|r| r.get("baseline_kl"));
        }
    }
    if !overlay.is_empty() {
        let path = out_dir.join("shift_kl.svg");
        write(&path, &line_chart("token KL to ground truth (nats)", &overlay, baseline))?;
        written.push(path);
    }
    Ok(written)
}
