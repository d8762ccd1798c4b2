//! Minimal SVG charts: line plots, histograms and bar charts.

use std::fmt::Write;

const W: f64 = 640.0;
const H: f64 = 400.0;
const LEFT: f64 = 64.0;
const RIGHT: f64 = 24.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 56.0;
const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

pub struct Series<'a> {
    pub name: &'a str,
    pub points: Vec<(f64, f64)>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

struct Frame {
    x: (f64, f64),
    y: (f64, f64),
}

impl Frame {
    fn new(x: (f64, f64), y: (f64, f64)) -> Self {
        let widen = |(a, b): (f64, f64)| if b > a { (a, b) } else { (a - 0.5, a + 0.5) };
        Self { x: widen(x), y: widen(y) }
    }

    fn px(&self, x: f64) -> f64 {
        LEFT + (x - self.x.0) / (self.x.1 - self.x.0) * (W - LEFT - RIGHT)
    }

    fn py(&self, y: f64) -> f64 {
        H - BOTTOM - (y - self.y.0) / (self.y.1 - self.y.0) * (H - TOP - BOTTOM)
    }
}

fn header(out: &mut String, title: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#,
        W / 2.0,
        escape(title)
    );
}

fn axes(out: &mut String, f: &Frame, xlabel: &str, ylabel: &str) {
    let (x0, x1, y0, y1) = (LEFT, W - RIGHT, TOP, H - BOTTOM);
    let _ = writeln!(
        out,
        r#"<path d="M{x0},{y0} L{x0},{y1} L{x1},{y1}" fill="none" stroke="black"/>"#
    );
    for i in 0..=4 {
        let t = i as f64 / 4.0;
        let xv = f.x.0 + t * (f.x.1 - f.x.0);
        let yv = f.y.0 + t * (f.y.1 - f.y.0);
        let (px, py) = (f.px(xv), f.py(yv));
        let _ = writeln!(
            out,
            r#"<text x="{px:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            y1 + 16.0,
            tick(xv)
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
            x0 - 6.0,
            py + 4.0,
            tick(yv)
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
        (x0 + x1) / 2.0,
        H - 16.0,
        escape(xlabel)
    );
    let _ = writeln!(
        out,
        r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">{}</text>"#,
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0,
        escape(ylabel)
    );
}

fn tick(v: f64) -> String {
    if v.abs() >= 100.0 || v == v.trunc() {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

fn legend(out: &mut String, names: &[&str]) {
    for (i, name) in names.iter().enumerate() {
        let y = TOP + 8.0 + i as f64 * 16.0;
        let x = W - RIGHT - 150.0;
        let _ = writeln!(
            out,
            r#"<rect x="{x}" y="{:.1}" width="10" height="10" fill="{}"/><text x="{:.1}" y="{:.1}">{}</text>"#,
            y - 9.0,
            COLORS[i % COLORS.len()],
            x + 14.0,
            y,
            escape(name)
        );
    }
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)))
}

pub fn line_chart(title: &str, xlabel: &str, ylabel: &str, series: &[Series], y_range: Option<(f64, f64)>) -> String {
    let x = bounds(series.iter().flat_map(|s| s.points.iter().map(|p| p.0)));
    let y = y_range.unwrap_or_else(|| bounds(series.iter().flat_map(|s| s.points.iter().map(|p| p.1))));
    let x = if x.0.is_finite() { x } else { (0.0, 1.0) };
    let y = if y.0.is_finite() { y } else { (0.0, 1.0) };
    let f = Frame::new(x, y);
    let mut out = String::new();
    header(&mut out, title);
    axes(&mut out, &f, xlabel, ylabel);
    for (i, s) in series.iter().enumerate() {
        let mut d = String::new();
        for (k, &(px, py)) in s.points.iter().enumerate() {
            let _ = write!(d, "{}{:.2},{:.2} ", if k == 0 { "M" } else { "L" }, f.px(px), f.py(py));
        }
        let _ = writeln!(
            out,
            r#"<path d="{}" fill="none" stroke="{}" stroke-width="1.5"/>"#,
            d.trim_end(),
            COLORS[i % COLORS.len()]
        );
    }
    legend(&mut out, &series.iter().map(|s| s.name).collect::<Vec<_>>());
    out.push_str("</svg>\n");
    out
}

/// Overlaid histograms sharing bin edges; `counts[i][b]` is series i, bin b.
pub fn histogram(title: &str, xlabel: &str, edges: &[f64], counts: &[(&str, Vec<f64>)]) -> String {
    let x = (edges[0], *edges.last().unwrap_or(&edges[0]));
    let ymax = counts.iter().flat_map(|c| c.1.iter().copied()).fold(0.0, f64::max);
    let f = Frame::new(x, (0.0, if ymax > 0.0 { ymax } else { 1.0 }));
    let mut out = String::new();
    header(&mut out, title);
    axes(&mut out, &f, xlabel, "fraction of timesteps");
    for (i, (_, c)) in counts.iter().enumerate() {
        for (b, &v) in c.iter().enumerate() {
            let (x0, x1) = (f.px(edges[b]), f.px(edges[b + 1]));
            let (y0, y1) = (f.py(v), f.py(0.0));
            let _ = writeln!(
                out,
                r#"<rect x="{x0:.2}" y="{y0:.2}" width="{:.2}" height="{:.2}" fill="{}" fill-opacity="0.45"/>"#,
                (x1 - x0).max(0.0),
                (y1 - y0).max(0.0),
                COLORS[i % COLORS.len()]
            );
        }
    }
    legend(&mut out, &counts.iter().map(|c| c.0).collect::<Vec<_>>());
    out.push_str("</svg>\n");
    out
}

/// Grouped bars: one group per category, one bar per series.
pub fn bar_chart(title: &str, ylabel: &str, categories: &[String], series: &[(&str, Vec<f64>)]) -> String {
    let ymax = series.iter().flat_map(|s| s.1.iter().copied()).fold(0.0, f64::max);
    let f = Frame::new((0.0, categories.len().max(1) as f64), (0.0, if ymax > 0.0 { ymax } else { 1.0 }));
    let mut out = String::new();
    header(&mut out, title);
    let (x0, x1, y1) = (LEFT, W - RIGHT, H - BOTTOM);
    let _ = writeln!(
        out,
        r#"<path d="M{x0},{TOP} L{x0},{y1} L{x1},{y1}" fill="none" stroke="black"/>"#
    );
    for i in 0..=4 {
        let v = ymax.max(1e-12) * i as f64 / 4.0;
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
            x0 - 6.0,
            f.py(v) + 4.0,
            tick(v)
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">{}</text>"#,
        (TOP + y1) / 2.0,
        (TOP + y1) / 2.0,
        escape(ylabel)
    );
    let groups = series.len().max(1) as f64;
    for (c, name) in categories.iter().enumerate() {
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            f.px(c as f64 + 0.5),
            y1 + 16.0,
            escape(name)
        );
        for (s, (_, values)) in series.iter().enumerate() {
            let v = values.get(c).copied().unwrap_or(0.0);
            let left = f.px(c as f64 + 0.1 + 0.8 * s as f64 / groups);
            let right = f.px(c as f64 + 0.1 + 0.8 * (s + 1) as f64 / groups);
            let _ = writeln!(
                out,
                r#"<rect x="{left:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="{}"/>"#,
                f.py(v),
                (right - left - 2.0).max(0.0),
                (f.py(0.0) - f.py(v)).max(0.0),
                COLORS[s % COLORS.len()]
            );
        }
    }
    legend(&mut out, &series.iter().map(|s| s.0).collect::<Vec<_>>());
    out.push_str("</svg>\n");
    out
}
