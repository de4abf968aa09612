//! SVG box plots drawn from per-image metric CSV files.

use std::fmt::Write as _;
use std::fs::File;
use std::path::{Path, PathBuf};

use mnet::metrics::{ImageRecord, MetricsReport, Summary};
use mnet::{Error, Result};

pub const METRICS: [&str; 4] = ["nmae", "nmse", "hfen", "ssim"];

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 60.0;

fn value(r: &ImageRecord, metric: &str) -> f64 {
    match metric {
        "nmae" => r.nmae,
        "nmse" => r.nmse,
        "hfen" => r.hfen,
        _ => r.ssim,
    }
}

/// Per-image records of one method, read back from its CSV.
pub struct Series {
    pub label: String,
    pub records: Vec<ImageRecord>,
}

impl Series {
    pub fn read(label: impl Into<String>, csv: &Path) -> Result<Self> {
        let file = File::open(csv).map_err(|e| Error::io(csv, e))?;
        Ok(Self {
            label: label.into(),
            records: MetricsReport::read_records_csv(file)?,
        })
    }

    fn values(&self, metric: &str) -> Vec<f64> {
        self.records.iter().map(|r| value(r, metric)).collect()
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Box (quartiles), whiskers (extremes) and a triangle at the mean for
/// every series.
pub fn box_plot(series: &[Series], metric: &str) -> String {
    let stats: Vec<Summary> = series.iter().map(|s| Summary::of(&s.values(metric))).collect();
    let lo = stats.iter().map(|s| s.min).fold(f64::INFINITY, f64::min);
    let hi = stats.iter().map(|s| s.max).fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if hi > lo { (lo, hi) } else { (lo - 0.5, lo + 0.5) };
    let pad = 0.05 * (hi - lo);
    let (lo, hi) = (lo - pad, hi + pad);
    let plot_h = HEIGHT - TOP - BOTTOM;
    let y = |v: f64| TOP + plot_h * (hi - v) / (hi - lo);
    let slot = (WIDTH - LEFT - RIGHT) / series.len().max(1) as f64;
    let half = (slot * 0.25).min(40.0);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="24" text-anchor="middle" font-size="16">{}</text>"#,
        WIDTH / 2.0,
        metric.to_uppercase()
    );
    let _ = writeln!(
        svg,
        r#"<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{}" stroke="black"/>"#,
        HEIGHT - BOTTOM
    );
    for k in 0..=4 {
        let v = lo + (hi - lo) * k as f64 / 4.0;
        let _ = writeln!(
            svg,
            r##"<line x1="{}" y1="{y:.2}" x2="{}" y2="{y:.2}" stroke="#ddd"/><text x="{}" y="{:.2}" text-anchor="end">{v:.4}</text>"##,
            LEFT,
            WIDTH - RIGHT,
            LEFT - 6.0,
            y(v) + 4.0,
            y = y(v)
        );
    }
    for (i, (s, st)) in series.iter().zip(&stats).enumerate() {
        let cx = LEFT + slot * (i as f64 + 0.5);
        let _ = writeln!(
            svg,
            r#"<line x1="{cx:.2}" y1="{:.2}" x2="{cx:.2}" y2="{:.2}" stroke="black"/>"#,
            y(st.max),
            y(st.q3)
        );
        let _ = writeln!(
            svg,
            r#"<line x1="{cx:.2}" y1="{:.2}" x2="{cx:.2}" y2="{:.2}" stroke="black"/>"#,
            y(st.q1),
            y(st.min)
        );
        for v in [st.min, st.max] {
            let _ = writeln!(
                svg,
                r#"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="black"/>"#,
                cx - half / 2.0,
                y(v),
                cx + half / 2.0,
                y(v)
            );
        }
        let _ = writeln!(
            svg,
            r##"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="#9ecae1" stroke="black"/>"##,
            cx - half,
            y(st.q3),
            2.0 * half,
            (y(st.q1) - y(st.q3)).max(0.5)
        );
        let _ = writeln!(
            svg,
            r#"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="black" stroke-width="2"/>"#,
            cx - half,
            y(st.median),
            cx + half,
            y(st.median)
        );
        let my = y(st.mean);
        let _ = writeln!(
            svg,
            r#"<polygon class="mean" points="{:.2},{:.2} {:.2},{:.2} {:.2},{:.2}" fill="red"/>"#,
            cx,
            my - 5.0,
            cx - 5.0,
            my + 4.0,
            cx + 5.0,
            my + 4.0
        );
        let _ = writeln!(
            svg,
            r#"<text x="{cx:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            HEIGHT - BOTTOM + 20.0,
            escape(&s.label)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

/// Writes `boxplot_<metric>.svg` for every metric; returns the paths.
pub fn write_box_plots(series: &[Series], dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for metric in METRICS {
        let path = dir.join(format!("boxplot_{metric}.svg"));
        std::fs::write(&path, box_plot(series, metric)).map_err(|e| Error::io(&path, e))?;
        out.push(path);
    }
    Ok(out)
}
