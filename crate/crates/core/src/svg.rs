//! Minimal deterministic SVG charts: labelled scatter plots and bar charts.

use std::fmt::Write;

const W: f64 = 640.0;
const H: f64 = 480.0;
const MARGIN: f64 = 56.0;
const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"];

fn colour(i: usize) -> &'static str {
    PALETTE[i % PALETTE.len()]
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn header(out: &mut String, title: &str) {
    let _ = write!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = write!(out, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = write!(out, r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#, W / 2.0, escape(title));
}

fn extent(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.filter(|v| v.is_finite()).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let pad = if hi > lo { 0.05 * (hi - lo) } else { 1.0 };
    (lo - pad, hi + pad)
}

/// Scatter plot coloured by `groups[i]`, one legend entry per name.
pub fn scatter(title: &str, points: &[[f64; 2]], groups: &[usize], names: &[String]) -> String {
    let mut out = String::new();
    header(&mut out, title);
    let (x0, x1) = extent(points.iter().map(|p| p[0]));
    let (y0, y1) = extent(points.iter().map(|p| p[1]));
    let sx = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (W - 2.0 * MARGIN);
    let sy = |y: f64| H - MARGIN - (y - y0) / (y1 - y0) * (H - 2.0 * MARGIN);
    let _ = write!(
        out,
        r##"<rect x="{MARGIN}" y="{MARGIN}" width="{}" height="{}" fill="none" stroke="#444"/>"##,
        W - 2.0 * MARGIN,
        H - 2.0 * MARGIN
    );
    for (p, &g) in points.iter().zip(groups) {
        if p[0].is_finite() && p[1].is_finite() {
            let _ = write!(out, r#"<circle cx="{:.2}" cy="{:.2}" r="2.2" fill="{}" fill-opacity="0.7"/>"#, sx(p[0]), sy(p[1]), colour(g));
        }
    }
    for (i, name) in names.iter().enumerate() {
        let y = MARGIN + 14.0 + 16.0 * i as f64;
        let _ = write!(out, r#"<circle cx="{}" cy="{}" r="4" fill="{}"/>"#, W - MARGIN - 90.0, y - 4.0, colour(i));
        let _ = write!(out, r#"<text x="{}" y="{}">{}</text>"#, W - MARGIN - 80.0, y, escape(name));
    }
    out.push_str("</svg>\n");
    out
}

/// Vertical bars, one group of bars per category, one series per colour.
pub fn grouped_bars(title: &str, categories: &[String], series: &[(String, Vec<f64>)]) -> String {
    let mut out = String::new();
    header(&mut out, title);
    let finite = series.iter().flat_map(|(_, v)| v.iter().copied()).filter(|v| v.is_finite());
    let top = finite.fold(0.0f64, f64::max).max(f64::MIN_POSITIVE);
    let plot_h = H - 2.0 * MARGIN - 40.0;
    let base = H - MARGIN - 40.0;
    let slot = (W - 2.0 * MARGIN) / categories.len().max(1) as f64;
    let bar = 0.8 * slot / series.len().max(1) as f64;
    let _ = write!(out, r##"<line x1="{MARGIN}" y1="{base}" x2="{}" y2="{base}" stroke="#444"/>"##, W - MARGIN);
    for (c, cat) in categories.iter().enumerate() {
        let x = MARGIN + slot * c as f64 + 0.1 * slot;
        for (s, (_, values)) in series.iter().enumerate() {
            let v = values.get(c).copied().unwrap_or(f64::NAN);
            if !v.is_finite() {
                continue;
            }
            let h = (v.max(0.0) / top) * plot_h;
            let _ = write!(
                out,
                r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="{}"/>"#,
                x + bar * s as f64,
                base - h,
                bar,
                h,
                colour(s)
            );
        }
        let lx = MARGIN + slot * (c as f64 + 0.5);
        let _ = write!(
            out,
            r#"<text x="{lx:.2}" y="{:.2}" text-anchor="end" transform="rotate(-40 {lx:.2} {:.2})" font-size="10">{}</text>"#,
            base + 12.0,
            base + 12.0,
            escape(cat)
        );
    }
    for (s, (name, _)) in series.iter().enumerate() {
        let y = MARGIN + 14.0 * s as f64;
        let _ = write!(out, r#"<rect x="{}" y="{}" width="10" height="10" fill="{}"/>"#, W - MARGIN - 100.0, y - 9.0, colour(s));
        let _ = write!(out, r#"<text x="{}" y="{}">{}</text>"#, W - MARGIN - 85.0, y, escape(name));
    }
    let _ = write!(out, r#"<text x="{}" y="{}" font-size="10">max {:.4}</text>"#, MARGIN, MARGIN - 4.0, top);
    out.push_str("</svg>\n");
    out
}

/// Single-series bar chart.
pub fn bars(title: &str, categories: &[String], values: &[f64]) -> String {
    grouped_bars(title, categories, &[(String::new(), values.to_vec())])
}
