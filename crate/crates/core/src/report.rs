//! Static SVG bar charts of evaluation reports.

use std::fmt::Write;

use crate::metrics::EvalReport;

const PALETTE: [&str; 6] = ["#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3", "#937860"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Grouped bars: one group per category, one bar per series, values in [0, 1].
pub fn grouped_bars(title: &str, categories: &[String], series: &[(String, Vec<f64>)]) -> String {
    let (w, h) = (120.0 + 90.0 * categories.len().max(1) as f64 * series.len().max(1) as f64 / 2.0, 360.0);
    let (left, right, top, bottom) = (50.0, 20.0, 40.0, 80.0);
    let plot_w = w - left - right;
    let plot_h = h - top - bottom;
    let group_w = plot_w / categories.len().max(1) as f64;
    let bar_w = group_w * 0.8 / series.len().max(1) as f64;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w:.0}" height="{h:.0}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
        w / 2.0,
        escape(title)
    );
    for i in 0..=5 {
        let v = i as f64 / 5.0;
        let y = top + plot_h * (1.0 - v);
        let _ = writeln!(
            s,
            r##"<line x1="{left}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#ddd"/><text x="{:.1}" y="{:.1}" text-anchor="end">{v:.1}</text>"##,
            w - right,
            left - 4.0,
            y + 4.0
        );
    }
    for (ci, cat) in categories.iter().enumerate() {
        let gx = left + group_w * ci as f64 + group_w * 0.1;
        for (si, (_, values)) in series.iter().enumerate() {
            let v = values.get(ci).copied().unwrap_or(0.0).clamp(0.0, 1.0);
            let bh = plot_h * v;
            let x = gx + bar_w * si as f64;
            let _ = writeln!(
                s,
                r#"<rect x="{x:.1}" y="{:.1}" width="{:.1}" height="{bh:.1}" fill="{}"><title>{:.4}</title></rect>"#,
                top + plot_h - bh,
                bar_w * 0.95,
                PALETTE[si % PALETTE.len()],
                v
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            left + group_w * (ci as f64 + 0.5),
            top + plot_h + 16.0,
            escape(cat)
        );
    }
    for (si, (name, _)) in series.iter().enumerate() {
        let y = h - bottom + 36.0 + 14.0 * (si / 3) as f64;
        let x = left + 150.0 * (si % 3) as f64;
        let _ = writeln!(
            s,
            r#"<rect x="{x:.1}" y="{:.1}" width="10" height="10" fill="{}"/><text x="{:.1}" y="{:.1}">{}</text>"#,
            y - 9.0,
            PALETTE[si % PALETTE.len()],
            x + 14.0,
            y,
            escape(name)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// PLA, ILA and macro F1 of each report.
pub fn metrics_chart(reports: &[(String, EvalReport)]) -> String {
    let categories = vec!["PLA".to_string(), "ILA".to_string(), "macro F1".to_string()];
    let series: Vec<(String, Vec<f64>)> = reports
        .iter()
        .map(|(name, r)| (name.clone(), vec![r.pla, r.ila, r.macro_f1]))
        .collect();
    grouped_bars("Accuracy and macro F1", &categories, &series)
}

/// Per-class F1 at each report's configured level, classes taken from the
/// first report.
pub fn per_class_f1_chart(reports: &[(String, EvalReport)]) -> String {
    let categories = reports
        .first()
        .map(|(_, r)| r.class_names.clone())
        .unwrap_or_default();
    let series: Vec<(String, Vec<f64>)> = reports
        .iter()
        .map(|(name, r)| {
            let f1 = match r.f1_level {
                crate::metrics::Level::Patch => &r.f1_patch,
                crate::metrics::Level::Image => &r.f1_image,
            };
            (name.clone(), f1.per_class.iter().map(|c| c.f1).collect())
        })
        .collect();
    grouped_bars("Per-class F1", &categories, &series)
}
