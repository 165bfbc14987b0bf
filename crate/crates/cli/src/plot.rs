//! Minimal figure writers: SVG line charts and PNG spectrogram panels.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{Context, Result};
use ndarray::Array2;

const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

/// One polyline per series over shared x positions. Points are spaced evenly
/// along x, so a geometric ε grid reads like a log axis.
pub fn line_chart_svg(title: &str, x_label: &str, xs: &[String], series: &[(&str, Vec<f64>)]) -> String {
    let (w, h) = (480.0, 320.0);
    let (left, right, top, bottom) = (50.0, 110.0, 30.0, 45.0);
    let pw = w - left - right;
    let ph = h - top - bottom;
    let y_max = series.iter().flat_map(|(_, v)| v.iter().copied()).fold(1.0f64, f64::max);
    let n = xs.len().max(2) - 1;
    let px = |i: usize| left + pw * i as f64 / n as f64;
    let py = |v: f64| top + ph * (1.0 - v / y_max);

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="11">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="18" text-anchor="middle" font-size="13">{}</text>"#, left + pw / 2.0, escape(title));
    let _ = writeln!(s, r#"<line x1="{left}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#, top + ph, left + pw, top + ph);
    let _ = writeln!(s, r#"<line x1="{left}" y1="{top}" x2="{left}" y2="{}" stroke="black"/>"#, top + ph);
    for (i, x) in xs.iter().enumerate() {
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, px(i), top + ph + 14.0, escape(x));
    }
    for k in 0..=4 {
        let v = y_max * k as f64 / 4.0;
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#, left - 4.0, py(v) + 4.0, (v * 10.0).round() / 10.0);
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, left + pw / 2.0, h - 8.0, escape(x_label));
    for (k, (name, ys)) in series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let pts: Vec<String> = ys.iter().enumerate().map(|(i, v)| format!("{:.1},{:.1}", px(i), py(*v))).collect();
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#, pts.join(" "));
        let ly = top + 14.0 * k as f64 + 8.0;
        let _ = writeln!(s, r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#, w - right + 10.0, w - right + 30.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}">{}</text>"#, w - right + 34.0, ly + 4.0, escape(name));
    }
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Side-by-side grayscale panels sharing one intensity scale, low frequencies
/// at the bottom. Values at or below `floor` render black.
pub fn write_panels_png(path: &Path, panels: &[Array2<f64>], floor: f64) -> Result<()> {
    let (rows, cols) = panels.first().map(|p| p.dim()).unwrap_or((1, 1));
    let gap = 4u32;
    let scale = 2u32;
    let (lo, hi) = panels
        .iter()
        .flat_map(|p| p.iter().copied())
        .filter(|v| v.is_finite() && *v > floor)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let pw = cols as u32 * scale;
    let width = panels.len() as u32 * (pw + gap) - gap;
    let height = rows as u32 * scale;
    let mut img = image::GrayImage::from_pixel(width.max(1), height.max(1), image::Luma([255]));
    for (k, p) in panels.iter().enumerate() {
        let x0 = k as u32 * (pw + gap);
        for ((r, c), v) in p.indexed_iter() {
            let g = if *v <= floor || !v.is_finite() { 0 } else { (((v - lo) / span).clamp(0.0, 1.0) * 255.0).round() as u8 };
            for dy in 0..scale {
                for dx in 0..scale {
                    let y = (rows - 1 - r) as u32 * scale + dy;
                    img.put_pixel(x0 + c as u32 * scale + dx, y, image::Luma([g]));
                }
            }
        }
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    img.save(path).with_context(|| format!("writing {}", path.display()))
}
