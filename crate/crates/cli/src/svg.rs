//! Static SVG charts: per-phase loss curves and grouped metric bars.

use std::fmt::Write;

use csi_core::pipeline::TrainingLog;

const WIDTH: f64 = 560.0;
const PANEL: f64 = 170.0;
const MARGIN: f64 = 48.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn polyline(points: &[(f64, f64)], color: &str, dashed: bool) -> String {
    let coords: Vec<String> = points.iter().map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
    let dash = if dashed { r#" stroke-dasharray="4 3""# } else { "" };
    format!(
        r#"<polyline fill="none" stroke="{color}" stroke-width="1.5"{dash} points="{}"/>"#,
        coords.join(" ")
    )
}

/// One panel per training phase with its own loss scale. Validation loss,
/// where logged, is drawn dashed.
pub fn loss_curves(log: &TrainingLog) -> String {
    let phases = log.phases();
    let height = PANEL * phases.len().max(1) as f64;
    let mut svg = String::new();
    writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{height}" font-family="sans-serif" font-size="11">"#
    )
    .unwrap();
    for (p, phase) in phases.iter().enumerate() {
        let records: Vec<_> = log.records.iter().filter(|r| &r.phase == phase).collect();
        let top = p as f64 * PANEL;
        let (x0, x1) = (MARGIN, WIDTH - 16.0);
        let (y0, y1) = (top + PANEL - 28.0, top + 22.0);
        let values = records.iter().flat_map(|r| std::iter::once(r.loss).chain(r.val_loss));
        let lo = values.clone().fold(f64::INFINITY, f64::min);
        let hi = values.fold(f64::NEG_INFINITY, f64::max);
        let span = if hi > lo { hi - lo } else { 1.0 };
        let last = records.len().saturating_sub(1).max(1) as f64;
        let at = |i: usize, v: f64| (x0 + (x1 - x0) * i as f64 / last, y0 - (y0 - y1) * (v - lo) / span);
        writeln!(
            svg,
            r##"<text x="{x0}" y="{}" font-weight="bold">phase {} ({} epochs)</text>"##,
            top + 14.0,
            escape(phase),
            records.len()
        )
        .unwrap();
        writeln!(
            svg,
            r##"<path d="M{x0},{y1} L{x0},{y0} L{x1},{y0}" fill="none" stroke="#444"/>"##
        )
        .unwrap();
        writeln!(svg, r#"<text x="4" y="{y1}">{hi:.3}</text>"#).unwrap();
        writeln!(svg, r#"<text x="4" y="{y0}">{lo:.3}</text>"#).unwrap();
        let train: Vec<(f64, f64)> = records.iter().enumerate().map(|(i, r)| at(i, r.loss)).collect();
        svg.push_str(&polyline(&train, COLORS[0], false));
        svg.push('\n');
        let val: Vec<(f64, f64)> = records
            .iter()
            .enumerate()
            .filter_map(|(i, r)| r.val_loss.map(|v| at(i, v)))
            .collect();
        if !val.is_empty() {
            svg.push_str(&polyline(&val, COLORS[1], true));
            svg.push('\n');
        }
    }
    svg.push_str("</svg>\n");
    svg
}

/// Grouped bars of one metric in `[0, 1]`: a group per row, a bar per
/// series, with the value printed above each bar.
pub fn metric_bars(title: &str, series: &[String], rows: &[(String, Vec<f64>)]) -> String {
    let group_width = (series.len().max(1) as f64) * 22.0 + 18.0;
    let width = MARGIN + group_width * rows.len().max(1) as f64 + 140.0;
    let height = 260.0;
    let (y0, y1) = (height - 40.0, 30.0);
    let mut svg = String::new();
    writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height}" font-family="sans-serif" font-size="10">"#
    )
    .unwrap();
    writeln!(svg, r#"<text x="{MARGIN}" y="16" font-weight="bold" font-size="12">{}</text>"#, escape(title)).unwrap();
    writeln!(
        svg,
        r##"<path d="M{MARGIN},{y1} L{MARGIN},{y0} L{:.2},{y0}" fill="none" stroke="#444"/>"##,
        width - 140.0
    )
    .unwrap();
    for tick in [0.0, 0.5, 1.0] {
        let y = y0 - (y0 - y1) * tick;
        writeln!(svg, r#"<text x="{}" y="{y:.2}" text-anchor="end">{tick:.1}</text>"#, MARGIN - 4.0).unwrap();
    }
    for (g, (label, values)) in rows.iter().enumerate() {
        let gx = MARGIN + 10.0 + g as f64 * group_width;
        for (s, v) in values.iter().enumerate() {
            let h = (y0 - y1) * v.clamp(0.0, 1.0);
            let x = gx + s as f64 * 22.0;
            writeln!(
                svg,
                r#"<rect x="{x:.2}" y="{:.2}" width="18" height="{h:.2}" fill="{}"/>"#,
                y0 - h,
                COLORS[s % COLORS.len()]
            )
            .unwrap();
            writeln!(
                svg,
                r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-size="8">{v:.3}</text>"#,
                x + 9.0,
                y0 - h - 3.0
            )
            .unwrap();
        }
        writeln!(svg, r#"<text x="{gx:.2}" y="{}">{}</text>"#, y0 + 14.0, escape(label)).unwrap();
    }
    for (s, name) in series.iter().enumerate() {
        let y = y1 + s as f64 * 16.0;
        let x = width - 130.0;
        writeln!(
            svg,
            r#"<rect x="{x:.2}" y="{y:.2}" width="10" height="10" fill="{}"/><text x="{:.2}" y="{:.2}">{}</text>"#,
            COLORS[s % COLORS.len()],
            x + 14.0,
            y + 9.0,
            escape(name)
        )
        .unwrap();
    }
    svg.push_str("</svg>\n");
    svg
}
