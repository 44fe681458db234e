//! Self-contained SVG line charts and plain-text tables for metric CSVs.

use std::fmt::Write as _;

const WIDTH: f64 = 680.0;
const HEIGHT: f64 = 420.0;
const MARGIN_L: f64 = 60.0;
const MARGIN_R: f64 = 170.0;
const MARGIN_T: f64 = 40.0;
const MARGIN_B: f64 = 50.0;

const COLORS: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf", "#7f7f7f",
];

pub struct Series {
    pub id: String,
    /// (x, y) pairs, already sorted by x.
    pub points: Vec<(f64, f64)>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Renders one line chart: mAP (fixed [0,1] axis) against a sweep
/// coordinate. Series with a single point render as a marker without a
/// polyline; an empty series list yields bare axes.
pub fn line_chart(title: &str, x_label: &str, series: &[Series]) -> String {
    let plot_w = WIDTH - MARGIN_L - MARGIN_R;
    let plot_h = HEIGHT - MARGIN_T - MARGIN_B;

    let xs: Vec<f64> = series
        .iter()
        .flat_map(|s| s.points.iter().map(|p| p.0))
        .collect();
    let (mut x_min, mut x_max) = xs
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    if xs.is_empty() {
        (x_min, x_max) = (0.0, 1.0);
    } else if x_min == x_max {
        x_min -= 1.0;
        x_max += 1.0;
    }
    let sx = |x: f64| MARGIN_L + (x - x_min) / (x_max - x_min) * plot_w;
    let sy = |y: f64| MARGIN_T + (1.0 - y.clamp(0.0, 1.0)) * plot_h;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(
        svg,
        r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#
    );
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="22" font-family="sans-serif" font-size="15" text-anchor="middle">{}</text>"#,
        MARGIN_L + plot_w / 2.0,
        escape(title)
    );

    // Axes.
    let (x0, y0, x1, y1) = (MARGIN_L, MARGIN_T, MARGIN_L + plot_w, MARGIN_T + plot_h);
    let _ = writeln!(
        svg,
        r#"<line x1="{x0}" y1="{y1}" x2="{x1}" y2="{y1}" stroke="black"/><line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>"#
    );
    for i in 0..=5 {
        let v = i as f64 / 5.0;
        let y = sy(v);
        let _ = writeln!(
            svg,
            r#"<line x1="{}" y1="{y}" x2="{x0}" y2="{y}" stroke="black"/><text x="{}" y="{}" font-family="sans-serif" font-size="11" text-anchor="end">{v:.1}</text>"#,
            x0 - 4.0,
            x0 - 8.0,
            y + 4.0
        );
    }
    let mut ticks: Vec<f64> = xs.clone();
    ticks.sort_by(|a, b| a.partial_cmp(b).unwrap());
    ticks.dedup();
    if ticks.len() > 8 {
        // keep endpoints plus a thinned middle
        let step = ticks.len().div_ceil(8);
        ticks = ticks.iter().step_by(step).copied().collect();
    }
    for &t in &ticks {
        let x = sx(t);
        let _ = writeln!(
            svg,
            r#"<line x1="{x}" y1="{y1}" x2="{x}" y2="{}" stroke="black"/><text x="{x}" y="{}" font-family="sans-serif" font-size="11" text-anchor="middle">{t}</text>"#,
            y1 + 4.0,
            y1 + 18.0
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" font-family="sans-serif" font-size="12" text-anchor="middle">{}</text>"#,
        MARGIN_L + plot_w / 2.0,
        HEIGHT - 12.0,
        escape(x_label)
    );
    let _ = writeln!(
        svg,
        r#"<text x="16" y="{}" font-family="sans-serif" font-size="12" text-anchor="middle" transform="rotate(-90 16 {})">mAP</text>"#,
        MARGIN_T + plot_h / 2.0,
        MARGIN_T + plot_h / 2.0
    );

    // Series.
    for (si, s) in series.iter().enumerate() {
        let color = COLORS[si % COLORS.len()];
        if s.points.len() >= 2 {
            let pts: Vec<String> = s
                .points
                .iter()
                .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
                .collect();
            let _ = writeln!(
                svg,
                r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
                pts.join(" ")
            );
        }
        for &(x, y) in &s.points {
            let _ = writeln!(
                svg,
                r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#,
                sx(x),
                sy(y)
            );
        }
        // Legend entry.
        let ly = MARGIN_T + 16.0 + si as f64 * 18.0;
        let lx = MARGIN_L + plot_w + 14.0;
        let _ = writeln!(
            svg,
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}" font-family="sans-serif" font-size="12">{}</text>"#,
            lx + 20.0,
            lx + 26.0,
            ly + 4.0,
            escape(&s.id)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

/// Fixed-width text table: rows x columns of optional values.
pub fn text_table(
    row_label: &str,
    rows: &[String],
    cols: &[String],
    cell: impl Fn(usize, usize) -> Option<f64>,
) -> String {
    let mut widths: Vec<usize> = cols.iter().map(|c| c.len().max(8)).collect();
    let row_w = rows
        .iter()
        .map(|r| r.len())
        .chain([row_label.len()])
        .max()
        .unwrap_or(8);
    let mut out = format!("{row_label:<row_w$}");
    for (ci, c) in cols.iter().enumerate() {
        let w = widths[ci].max(c.len());
        widths[ci] = w;
        out.push_str(&format!("  {c:>w$}"));
    }
    out.push('\n');
    for (ri, r) in rows.iter().enumerate() {
        out.push_str(&format!("{r:<row_w$}"));
        for (ci, &w) in widths.iter().enumerate() {
            match cell(ri, ci) {
                Some(v) => out.push_str(&format!("  {:>w$.4}", v)),
                None => out.push_str(&format!("  {:>w$}", "-")),
            }
        }
        out.push('\n');
    }
    out
}
