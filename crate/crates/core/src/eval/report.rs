use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{LayerMetrics, Metrics};
use crate::error::{Error, Result};

pub const METRICS_HEADER: &str = "scene,layer,query_count,recall50,ap25,ap50,map";

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub scene: String,
    pub layer: usize,
    pub query_count: usize,
    pub metrics: Metrics,
}

impl MetricsRow {
    pub fn from_layer(scene: &str, m: &LayerMetrics) -> Self {
        Self {
            scene: scene.to_string(),
            layer: m.layer,
            query_count: m.query_count,
            metrics: m.metrics,
        }
    }
}

/// Mean over scenes for each layer, labeled `ALL`. The query count is the
/// per-layer mean rounded to the nearest integer.
pub fn summary_rows(rows: &[MetricsRow]) -> Vec<MetricsRow> {
    let max_layer = rows.iter().map(|r| r.layer).max().unwrap_or(0);
    (1..=max_layer)
        .filter_map(|l| {
            let sel: Vec<&MetricsRow> = rows.iter().filter(|r| r.layer == l).collect();
            if sel.is_empty() {
                return None;
            }
            let ms: Vec<Metrics> = sel.iter().map(|r| r.metrics).collect();
            let q = sel.iter().map(|r| r.query_count).sum::<usize>() as f64 / sel.len() as f64;
            Some(MetricsRow {
                scene: "ALL".into(),
                layer: l,
                query_count: q.round() as usize,
                metrics: Metrics::mean(&ms),
            })
        })
        .collect()
}

pub fn format_metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::new();
    out.push_str(METRICS_HEADER);
    out.push('\n');
    for r in rows.iter().cloned().chain(summary_rows(rows)) {
        let m = r.metrics;
        let _ = writeln!(
            out,
            "{},{},{},{:.6},{:.6},{:.6},{:.6}",
            r.scene, r.layer, r.query_count, m.recall50, m.ap25, m.ap50, m.map
        );
    }
    out
}

/// Writes per-scene rows followed by the `ALL` summary rows.
pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    fs::write(path, format_metrics_csv(rows)).map_err(|e| Error::io(path, e))
}

/// A line chart of recall against layer, one polyline per series.
pub fn recall_chart_svg(series: &[(String, Vec<f64>)]) -> String {
    const W: f64 = 480.0;
    const H: f64 = 320.0;
    const PAD: f64 = 48.0;
    const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];
    let layers = series.iter().map(|s| s.1.len()).max().unwrap_or(0).max(2);
    let x = |l: usize| PAD + (W - 2.0 * PAD) * l as f64 / (layers - 1) as f64;
    let y = |v: f64| H - PAD - (H - 2.0 * PAD) * v.clamp(0.0, 1.0);

    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let (x0, x1, y0, y1) = (PAD, W - PAD, y(0.0), y(1.0));
    let _ = writeln!(out, r#"<path d="M{x0} {y1} L{x0} {y0} L{x1} {y0}" stroke="black" fill="none"/>"#);
    for t in 0..=4 {
        let v = t as f64 / 4.0;
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" text-anchor="end">{v:.2}</text>"#,
            PAD - 6.0,
            y(v) + 4.0
        );
    }
    for l in 0..layers {
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
            x(l),
            y0 + 18.0,
            l + 1
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" text-anchor="middle">layer</text>"#,
        W / 2.0,
        H - 8.0
    );
    let _ = writeln!(out, r#"<text x="12" y="{}" transform="rotate(-90 12 {})" text-anchor="middle">recall@50</text>"#, H / 2.0, H / 2.0);
    for (k, (name, values)) in series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let pts: Vec<String> = values
            .iter()
            .enumerate()
            .map(|(l, &v)| format!("{:.1},{:.1}", x(l), y(v)))
            .collect();
        let _ = writeln!(
            out,
            r#"<polyline points="{}" stroke="{color}" stroke-width="2" fill="none"/>"#,
            pts.join(" ")
        );
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" fill="{color}">{}</text>"#,
            W - PAD + 4.0 - 40.0,
            PAD + 14.0 * k as f64,
            escape(name)
        );
    }
    out.push_str("</svg>\n");
    out
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(scene: &str, layer: usize, r: f64) -> MetricsRow {
        MetricsRow {
            scene: scene.into(),
            layer,
            query_count: 8,
            metrics: Metrics {
                recall50: r,
                ..Metrics::default()
            },
        }
    }

    #[test]
    fn csv_has_header_and_all_rows() {
        let rows = vec![row("a", 1, 0.5), row("a", 2, 1.0), row("b", 1, 0.0), row("b", 2, 0.5)];
        let csv = format_metrics_csv(&rows);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], METRICS_HEADER);
        assert_eq!(lines.len(), 7);
        assert_eq!(lines[5], "ALL,1,8,0.250000,0.000000,0.000000,0.000000");
        assert_eq!(lines[6], "ALL,2,8,0.750000,0.000000,0.000000,0.000000");
        assert!(!csv.contains('\r'));
    }

    #[test]
    fn svg_is_well_formed_enough() {
        let svg = recall_chart_svg(&[("on".into(), vec![0.2, 0.5, 0.6])]);
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<polyline").count(), 1);
    }
}
