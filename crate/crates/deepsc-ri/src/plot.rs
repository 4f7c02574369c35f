//! SVG line charts for sweep results: one chart per metric (PSNR, LPIPS,
//! accuracy) versus the sweep axis, one curve per model. Output is plain
//! hand-assembled SVG so rendering is deterministic: identical CSV input
//! produces byte-identical image files.

use crate::error::{Error, Result};
use crate::metrics::EvalReport;
use serde::Deserialize;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

/// One parsed sweep CSV row (column names match [`EvalReport::CSV_HEADER`]).
#[derive(Debug, Clone, Deserialize)]
pub struct SweepRow {
    pub model: String,
    pub channel: String,
    pub snr_db: f64,
    pub isii_bin: f32,
    pub psnr_mean: f64,
    pub psnr_std: f64,
    pub lpips_mean: f64,
    pub lpips_std: f64,
    pub acc: f64,
    pub n_samples: usize,
    pub seed: u64,
}

/// Which condition variable a sweep varied.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlotAxis {
    Snr,
    Isii,
}

impl PlotAxis {
    pub fn label(self) -> &'static str {
        match self {
            PlotAxis::Snr => "SNR (dB)",
            PlotAxis::Isii => "ISII",
        }
    }

    fn value(self, row: &SweepRow) -> f64 {
        match self {
            PlotAxis::Snr => row.snr_db,
            PlotAxis::Isii => row.isii_bin as f64,
        }
    }
}

/// Read a sweep CSV; malformed rows are reported with their line number.
pub fn read_sweep_csv(path: &Path) -> Result<Vec<SweepRow>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| match e.kind() {
        csv::ErrorKind::Io(_) => Error::parse(path, e.to_string()),
        _ => Error::parse(path, e.to_string()),
    })?;
    {
        let got = reader
            .headers()
            .map_err(|e| Error::parse(path, e.to_string()))?;
        let want: Vec<&str> = EvalReport::CSV_HEADER.split(',').collect();
        if got.iter().collect::<Vec<_>>() != want {
            return Err(Error::parse(
                path,
                format!(
                    "header mismatch: expected '{}', got '{}'",
                    EvalReport::CSV_HEADER,
                    got.iter().collect::<Vec<_>>().join(",")
                ),
            ));
        }
    }
    let mut rows = Vec::new();
    for record in reader.deserialize::<SweepRow>() {
        let row = record.map_err(|e| {
            let line = e
                .position()
                .map(|p| p.line().to_string())
                .unwrap_or_else(|| "?".into());
            Error::parse(path, format!("line {line}: {e}"))
        })?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Data(format!(
            "{} holds no sweep rows to plot",
            path.display()
        )));
    }
    Ok(rows)
}

/// One curve on a chart.
struct Series {
    name: String,
    points: Vec<(f64, f64)>,
}

/// Group rows into per-model series along `axis`, sorted by axis value.
fn series_for(rows: &[SweepRow], axis: PlotAxis, metric: impl Fn(&SweepRow) -> f64) -> Vec<Series> {
    let mut order: Vec<&str> = Vec::new();
    for row in rows {
        if !order.contains(&row.model.as_str()) {
            order.push(&row.model);
        }
    }
    order
        .into_iter()
        .map(|model| {
            let mut points: Vec<(f64, f64)> = rows
                .iter()
                .filter(|r| r.model == model)
                .map(|r| (axis.value(r), metric(r)))
                .collect();
            points.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("axis values are ordered"));
            Series {
                name: model.to_string(),
                points,
            }
        })
        .collect()
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 440.0;
const MARGIN_L: f64 = 70.0;
const MARGIN_R: f64 = 24.0;
const MARGIN_T: f64 = 48.0;
const MARGIN_B: f64 = 56.0;
const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf",
];

/// Round-number tick positions covering [lo, hi].
fn ticks(lo: f64, hi: f64, target: usize) -> Vec<f64> {
    let span = (hi - lo).max(1e-12);
    let raw = span / target as f64;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0]
        .iter()
        .map(|m| m * mag)
        .find(|&s| span / s <= target as f64)
        .unwrap_or(10.0 * mag);
    let first = (lo / step).ceil() * step;
    let mut out = Vec::new();
    let mut t = first;
    while t <= hi + 1e-9 * span {
        // Snap near-zero ticks so "-0" never appears.
        out.push(if t.abs() < step * 1e-9 { 0.0 } else { t });
        t += step;
    }
    out
}

fn fmt_tick(v: f64) -> String {
    if (v - v.round()).abs() < 1e-9 {
        format!("{}", v.round() as i64)
    } else {
        let s = format!("{v:.3}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

/// Render one chart to an SVG string.
fn render_chart(series: &[Series], title: &str, x_label: &str, y_label: &str) -> String {
    let xs: Vec<f64> = series.iter().flat_map(|s| s.points.iter().map(|p| p.0)).collect();
    let ys: Vec<f64> = series.iter().flat_map(|s| s.points.iter().map(|p| p.1)).collect();
    let (mut x_lo, mut x_hi) = min_max(&xs);
    let (mut y_lo, mut y_hi) = min_max(&ys);
    if x_hi - x_lo < 1e-12 {
        x_lo -= 0.5;
        x_hi += 0.5;
    }
    if y_hi - y_lo < 1e-12 {
        y_lo -= 0.5;
        y_hi += 0.5;
    } else {
        let pad = 0.06 * (y_hi - y_lo);
        y_lo -= pad;
        y_hi += pad;
    }
    let plot_w = WIDTH - MARGIN_L - MARGIN_R;
    let plot_h = HEIGHT - MARGIN_T - MARGIN_B;
    let px = |x: f64| MARGIN_L + (x - x_lo) / (x_hi - x_lo) * plot_w;
    let py = |y: f64| MARGIN_T + plot_h - (y - y_lo) / (y_hi - y_lo) * plot_h;

    let mut svg = String::new();
    let _ = write!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" \
         viewBox=\"0 0 {WIDTH} {HEIGHT}\" font-family=\"Helvetica,Arial,sans-serif\">\n\
         <rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>\n\
         <text x=\"{:.1}\" y=\"26\" font-size=\"16\" text-anchor=\"middle\">{}</text>\n",
        MARGIN_L + plot_w / 2.0,
        escape(title)
    );

    // Grid and ticks.
    for t in ticks(x_lo, x_hi, 6) {
        let x = px(t);
        let _ = write!(
            svg,
            "<line x1=\"{x:.1}\" y1=\"{:.1}\" x2=\"{x:.1}\" y2=\"{:.1}\" stroke=\"#dddddd\"/>\n\
             <text x=\"{x:.1}\" y=\"{:.1}\" font-size=\"11\" text-anchor=\"middle\">{}</text>\n",
            MARGIN_T,
            MARGIN_T + plot_h,
            MARGIN_T + plot_h + 16.0,
            fmt_tick(t)
        );
    }
    for t in ticks(y_lo, y_hi, 6) {
        let y = py(t);
        let _ = write!(
            svg,
            "<line x1=\"{:.1}\" y1=\"{y:.1}\" x2=\"{:.1}\" y2=\"{y:.1}\" stroke=\"#dddddd\"/>\n\
             <text x=\"{:.1}\" y=\"{:.1}\" font-size=\"11\" text-anchor=\"end\">{}</text>\n",
            MARGIN_L,
            MARGIN_L + plot_w,
            MARGIN_L - 8.0,
            y + 4.0,
            fmt_tick(t)
        );
    }
    // Axes frame and labels.
    let _ = write!(
        svg,
        "<rect x=\"{MARGIN_L}\" y=\"{MARGIN_T}\" width=\"{plot_w:.1}\" height=\"{plot_h:.1}\" \
         fill=\"none\" stroke=\"#333333\"/>\n\
         <text x=\"{:.1}\" y=\"{:.1}\" font-size=\"13\" text-anchor=\"middle\">{}</text>\n\
         <text x=\"18\" y=\"{:.1}\" font-size=\"13\" text-anchor=\"middle\" \
         transform=\"rotate(-90 18 {:.1})\">{}</text>\n",
        MARGIN_L + plot_w / 2.0,
        HEIGHT - 14.0,
        escape(x_label),
        MARGIN_T + plot_h / 2.0,
        MARGIN_T + plot_h / 2.0,
        escape(y_label)
    );

    // Curves with markers.
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        if s.points.len() > 1 {
            let pts: Vec<String> = s
                .points
                .iter()
                .map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y)))
                .collect();
            let _ = write!(
                svg,
                "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"2\"/>\n",
                pts.join(" ")
            );
        }
        for &(x, y) in &s.points {
            let _ = write!(
                svg,
                "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3.5\" fill=\"{color}\"/>\n",
                px(x),
                py(y)
            );
        }
    }

    // Legend: one entry per series, top-right inside the plot area.
    let legend_w = 10.0 + 8.0 * series.iter().map(|s| s.name.len()).max().unwrap_or(4) as f64 + 34.0;
    let legend_x = MARGIN_L + plot_w - legend_w - 8.0;
    let legend_y = MARGIN_T + 8.0;
    let _ = write!(
        svg,
        "<rect x=\"{legend_x:.1}\" y=\"{legend_y:.1}\" width=\"{legend_w:.1}\" height=\"{:.1}\" \
         fill=\"white\" fill-opacity=\"0.85\" stroke=\"#999999\"/>\n",
        10.0 + 18.0 * series.len() as f64
    );
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let y = legend_y + 14.0 + 18.0 * i as f64;
        let _ = write!(
            svg,
            "<line x1=\"{:.1}\" y1=\"{y:.1}\" x2=\"{:.1}\" y2=\"{y:.1}\" stroke=\"{color}\" stroke-width=\"2\"/>\n\
             <text x=\"{:.1}\" y=\"{:.1}\" font-size=\"12\">{}</text>\n",
            legend_x + 6.0,
            legend_x + 30.0,
            legend_x + 36.0,
            y + 4.0,
            escape(&s.name)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

fn min_max(values: &[f64]) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    (lo, hi)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Render the three metric charts for one sweep CSV. Files are written next
/// to each other as `<stem>-psnr.svg`, `<stem>-lpips.svg`, `<stem>-acc.svg`;
/// returns the written paths.
pub fn plot_sweep(csv_path: &Path, axis: PlotAxis, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let rows = read_sweep_csv(csv_path)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let stem = csv_path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("sweep");
    let channel = rows[0].channel.clone();
    let charts: [(&str, &str, Box<dyn Fn(&SweepRow) -> f64>); 3] = [
        ("psnr", "PSNR (dB)", Box::new(|r: &SweepRow| r.psnr_mean)),
        ("lpips", "LPIPS", Box::new(|r: &SweepRow| r.lpips_mean)),
        ("acc", "Accuracy", Box::new(|r: &SweepRow| r.acc)),
    ];
    let mut written = Vec::with_capacity(3);
    for (key, y_label, metric) in charts {
        let series = series_for(&rows, axis, metric);
        let title = format!("{y_label} vs {} ({channel} channel)", axis.label());
        let svg = render_chart(&series, &title, axis.label(), y_label);
        let path = out_dir.join(format!("{stem}-{key}.svg"));
        std::fs::write(&path, svg).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_csv(path: &Path, body: &str) {
        std::fs::write(path, format!("{}\n{body}", EvalReport::CSV_HEADER)).unwrap();
    }

    fn sample_body() -> String {
        let mut s = String::new();
        for (model, base) in [("deepsc-ri", 24.0), ("vit-baseline", 22.0)] {
            for (i, snr) in [0.0, 6.0, 12.0, 18.0].iter().enumerate() {
                let _ = writeln!(
                    s,
                    "{model},awgn,{snr},0.2,{},0.5,{},0.01,{},128,7",
                    base + i as f64,
                    0.30 - 0.02 * i as f64,
                    0.60 + 0.05 * i as f64,
                );
            }
        }
        s
    }

    #[test]
    fn sweep_produces_three_charts_with_legend() {
        let dir = tempfile::tempdir().unwrap();
        let csv = dir.path().join("snr-sweep.csv");
        write_csv(&csv, &sample_body());
        let files = plot_sweep(&csv, PlotAxis::Snr, dir.path()).unwrap();
        assert_eq!(files.len(), 3);
        for f in &files {
            assert!(f.exists(), "{f:?}");
            let svg = std::fs::read_to_string(f).unwrap();
            // Two models -> two legend entries; four points per curve.
            assert_eq!(svg.matches("deepsc-ri").count(), 1);
            assert_eq!(svg.matches("vit-baseline").count(), 1);
            assert_eq!(svg.matches("<polyline").count(), 2);
            assert_eq!(svg.matches("<circle").count(), 8);
        }
        assert!(files[0].file_name().unwrap().to_str().unwrap() == "snr-sweep-psnr.svg");
    }

    #[test]
    fn rendering_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let csv = dir.path().join("s.csv");
        write_csv(&csv, &sample_body());
        let a = plot_sweep(&csv, PlotAxis::Snr, &dir.path().join("a")).unwrap();
        let b = plot_sweep(&csv, PlotAxis::Snr, &dir.path().join("b")).unwrap();
        for (fa, fb) in a.iter().zip(&b) {
            assert_eq!(
                std::fs::read(fa).unwrap(),
                std::fs::read(fb).unwrap(),
                "identical input must render identical SVG bytes"
            );
        }
    }

    #[test]
    fn empty_csv_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let csv = dir.path().join("empty.csv");
        write_csv(&csv, "");
        let err = plot_sweep(&csv, PlotAxis::Snr, dir.path()).unwrap_err();
        assert!(matches!(err, Error::Data(_)), "{err}");
    }

    #[test]
    fn malformed_row_errors_name_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let csv = dir.path().join("bad.csv");
        write_csv(
            &csv,
            "deepsc-ri,awgn,0.0,0.2,24.0,0.5,0.3,0.01,0.6,128,7\nderailed-row,awgn,not-a-number,0.2,24,0.5,0.3,0.01,0.6,128,7\n",
        );
        let err = read_sweep_csv(&csv).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 3"), "should name the line: {msg}");
    }

    #[test]
    fn header_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let csv = dir.path().join("hdr.csv");
        std::fs::write(&csv, "model,foo\na,1\n").unwrap();
        let err = read_sweep_csv(&csv).unwrap_err();
        assert!(err.to_string().contains("header mismatch"), "{err}");
    }

    #[test]
    fn isii_axis_uses_bin_values() {
        let dir = tempfile::tempdir().unwrap();
        let csv = dir.path().join("isii-sweep.csv");
        let mut body = String::new();
        for bin in [0.2f32, 0.5, 0.8] {
            let _ = writeln!(body, "deepsc-ri,rician,18.0,{bin},24.0,0.5,0.3,0.01,0.6,128,7");
        }
        write_csv(&csv, &body);
        let files = plot_sweep(&csv, PlotAxis::Isii, dir.path()).unwrap();
        let svg = std::fs::read_to_string(&files[0]).unwrap();
        assert!(svg.contains("ISII"));
        assert!(svg.contains("rician"));
    }
}
