//! Minimal SVG line charts of metric curves against the number of pasted
//! logos.

use std::fmt::Write as _;

use crate::evaluation::{AttackReport, CurveRow};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Accuracy,
    Tpr,
    TargetRate,
    NegativeRate,
    /// Precision of the report's target label.
    TargetPrecision,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Accuracy => "accuracy",
            Metric::Tpr => "TPR",
            Metric::TargetRate => "target prediction rate",
            Metric::NegativeRate => "negative adjective rate",
            Metric::TargetPrecision => "target precision",
        }
    }

    fn value(self, row: &CurveRow, target: &str) -> Option<f64> {
        match self {
            Metric::Accuracy => row.accuracy,
            Metric::Tpr => row.tpr,
            Metric::TargetRate => row.target_rate,
            Metric::NegativeRate => row.negative_rate,
            Metric::TargetPrecision => row.precision.get(target).map(|p| p.value),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(usize, f64)>,
}

/// Series for every metric the report carries, plus generic-logo curves
/// when attached.
pub fn report_series(report: &AttackReport) -> Vec<Series> {
    let all = [
        Metric::Accuracy,
        Metric::Tpr,
        Metric::TargetPrecision,
        Metric::NegativeRate,
    ];
    let target = report.meta.target.as_str();
    let mut out = Vec::new();
    let mut push = |rows: &[CurveRow], suffix: &str| {
        for m in all {
            let points: Vec<(usize, f64)> = rows
                .iter()
                .filter_map(|r| m.value(r, target).map(|v| (r.k, v)))
                .collect();
            if !points.is_empty() {
                out.push(Series {
                    name: format!("{}{suffix}", m.name()),
                    points,
                });
            }
        }
    };
    push(&report.rows, "");
    if let Some(g) = &report.generic_rows {
        push(g, " (generic)");
    }
    out
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f",
];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Render series on a [0,1] y axis over the integer k range.
pub fn render_svg(title: &str, series: &[Series]) -> String {
    let (w, h) = (560.0, 360.0);
    let (left, right, top, bottom) = (56.0, 180.0, 36.0, 44.0);
    let plot_w = w - left - right;
    let plot_h = h - top - bottom;
    let k_max = series
        .iter()
        .flat_map(|s| s.points.iter().map(|p| p.0))
        .max()
        .unwrap_or(0)
        .max(1);
    let x = |k: usize| left + plot_w * k as f64 / k_max as f64;
    let y = |v: f64| top + plot_h * (1.0 - v.clamp(0.0, 1.0));

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
        left + plot_w / 2.0,
        escape(title)
    );
    for i in 0..=4 {
        let v = i as f64 / 4.0;
        let _ = writeln!(
            svg,
            r##"<line x1="{left}" y1="{0:.1}" x2="{1}" y2="{0:.1}" stroke="#ddd"/><text x="{2}" y="{3:.1}" text-anchor="end">{v:.2}</text>"##,
            y(v),
            left + plot_w,
            left - 6.0,
            y(v) + 4.0
        );
    }
    for k in 0..=k_max {
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{}" text-anchor="middle">{k}</text>"#,
            x(k),
            top + plot_h + 18.0
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{:.1}" y="{}" text-anchor="middle">logos pasted (k)</text>"#,
        left + plot_w / 2.0,
        h - 6.0
    );
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = s
            .points
            .iter()
            .map(|&(k, v)| format!("{:.1},{:.1}", x(k), y(v)))
            .collect();
        let _ = writeln!(
            svg,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            pts.join(" ")
        );
        for &(k, v) in &s.points {
            let _ = writeln!(
                svg,
                r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="{color}"/>"#,
                x(k),
                y(v)
            );
        }
        let ly = top + 14.0 + 18.0 * i as f64;
        let lx = left + plot_w + 14.0;
        let _ = writeln!(
            svg,
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}">{}</text>"#,
            lx + 18.0,
            lx + 24.0,
            ly + 4.0,
            escape(&s.name)
        );
    }
    svg.push_str("</svg>\n");
    svg
}
