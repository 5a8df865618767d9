//! Minimal static SVG charts.

use std::fmt::Write;

const WIDTH: f64 = 720.0;
const MARGIN: f64 = 60.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn header(out: &mut String, height: f64, title: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{height}" viewBox="0 0 {WIDTH} {height}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    );
}

/// Horizontal bars in the given order, labels on the left.
pub fn bar_chart(title: &str, labels: &[String], values: &[f64]) -> String {
    let row = 22.0;
    let left = 200.0;
    let height = MARGIN + row * labels.len() as f64 + 30.0;
    let max = values.iter().cloned().fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    let span = WIDTH - left - MARGIN;
    let mut out = String::new();
    header(&mut out, height, title);
    for (k, (label, v)) in labels.iter().zip(values).enumerate() {
        let y = MARGIN + row * k as f64;
        let w = span * v.max(0.0) / max;
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
            left - 8.0,
            y + 14.0,
            escape(label)
        );
        let _ = writeln!(
            out,
            r##"<rect x="{left:.1}" y="{:.1}" width="{w:.2}" height="{:.1}" fill="#3b75af"/>"##,
            y + 3.0,
            row - 6.0
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}">{v:.4}</text>"#,
            left + w + 6.0,
            y + 14.0
        );
    }
    out.push_str("</svg>\n");
    out
}

/// Vertical bars with a count on top of each.
pub fn histogram(title: &str, labels: &[String], counts: &[usize]) -> String {
    let height = 360.0;
    let plot_h = height - 2.0 * MARGIN;
    let slot = (WIDTH - 2.0 * MARGIN) / labels.len().max(1) as f64;
    let max = counts.iter().copied().max().unwrap_or(0).max(1) as f64;
    let mut out = String::new();
    header(&mut out, height, title);
    let base = height - MARGIN;
    let _ = writeln!(
        out,
        r#"<line x1="{MARGIN}" y1="{base}" x2="{}" y2="{base}" stroke="black"/>"#,
        WIDTH - MARGIN
    );
    for (k, (label, &c)) in labels.iter().zip(counts).enumerate() {
        let x = MARGIN + slot * k as f64;
        let h = plot_h * c as f64 / max;
        let _ = writeln!(
            out,
            r##"<rect x="{:.1}" y="{:.2}" width="{:.1}" height="{h:.2}" fill="#d9822b"/>"##,
            x + slot * 0.15,
            base - h,
            slot * 0.7
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.2}" text-anchor="middle">{c}</text>"#,
            x + slot / 2.0,
            base - h - 4.0
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            x + slot / 2.0,
            base + 18.0,
            escape(label)
        );
    }
    out.push_str("</svg>\n");
    out
}

/// One polyline per series over a shared axis range.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    let height = 420.0;
    let points = series.iter().flat_map(|(_, p)| p.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in points {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
        y1 = y0 + 1.0;
    }
    let (pw, ph) = (WIDTH - 2.0 * MARGIN, height - 2.0 * MARGIN);
    let sx = |x: f64| MARGIN + pw * (x - x0) / (x1 - x0);
    let sy = |y: f64| height - MARGIN - ph * (y - y0) / (y1 - y0);

    let mut out = String::new();
    header(&mut out, height, title);
    let _ = writeln!(
        out,
        r#"<rect x="{MARGIN}" y="{MARGIN}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    for (v, x, y, anchor) in [
        (y1, MARGIN - 6.0, MARGIN + 4.0, "end"),
        (y0, MARGIN - 6.0, height - MARGIN, "end"),
        (x0, MARGIN, height - MARGIN + 16.0, "middle"),
        (x1, WIDTH - MARGIN, height - MARGIN + 16.0, "middle"),
    ] {
        let _ = writeln!(out, r#"<text x="{x:.1}" y="{y:.1}" text-anchor="{anchor}">{v:.4}</text>"#);
    }
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
        WIDTH / 2.0,
        height - 16.0,
        escape(x_label)
    );
    let _ = writeln!(
        out,
        r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">{}</text>"#,
        height / 2.0,
        height / 2.0,
        escape(y_label)
    );
    for (k, (name, pts)) in series.iter().enumerate() {
        if pts.is_empty() {
            continue;
        }
        let hue = (k * 47) % 360;
        let path: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        let _ = writeln!(
            out,
            r#"<polyline fill="none" stroke="hsl({hue},60%,45%)" stroke-width="1.2" points="{}"><title>{}</title></polyline>"#,
            path.join(" "),
            escape(name)
        );
    }
    out.push_str("</svg>\n");
    out
}
