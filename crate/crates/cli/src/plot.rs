//! Static SVG line charts of metrics columns against step.

use std::fmt::Write;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const LEFT: f64 = 60.0;
const RIGHT: f64 = 160.0;
const TOP: f64 = 20.0;
const BOTTOM: f64 = 40.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

fn range(values: impl Iterator<Item = f64>) -> Option<(f64, f64)> {
    values.fold(None, |acc, v| match acc {
        None => Some((v, v)),
        Some((lo, hi)) => Some((lo.min(v), hi.max(v))),
    })
}

/// With one series the y axis carries its units; with several, each is
/// scaled to its own range and the legend gives the range.
pub fn render(series: &[Series]) -> String {
    let plot_w = WIDTH - LEFT - RIGHT;
    let plot_h = HEIGHT - TOP - BOTTOM;
    let (x0, x1) = range(series.iter().flat_map(|s| s.points.iter().map(|p| p.0))).unwrap_or((0.0, 1.0));
    let x_span = if x1 > x0 { x1 - x0 } else { 1.0 };
    let shared = series.len() == 1;

    let mut svg = String::new();
    let _ = writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#);
    let _ = writeln!(svg, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let (bx, by) = (LEFT, TOP + plot_h);
    let _ = writeln!(svg, r#"<path d="M{LEFT},{TOP} L{bx},{by} L{:.1},{by}" fill="none" stroke="black"/>"#, LEFT + plot_w);
    let _ = writeln!(svg, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="12">step</text>"#, LEFT + plot_w / 2.0, HEIGHT - 8.0);
    for (i, label) in [x0, x1].iter().enumerate() {
        let x = LEFT + i as f64 * plot_w;
        let _ = writeln!(svg, r#"<text x="{x:.1}" y="{:.1}" text-anchor="middle" font-size="10">{label}</text>"#, by + 14.0);
    }

    let y_range = |s: &Series| {
        let (lo, hi) = range(s.points.iter().map(|p| p.1)).unwrap_or((0.0, 1.0));
        if hi > lo {
            (lo, hi)
        } else {
            (lo - 0.5, hi + 0.5)
        }
    };
    if shared {
        let (lo, hi) = y_range(&series[0]);
        for (frac, v) in [(0.0, lo), (1.0, hi)] {
            let y = by - frac * plot_h;
            let _ = writeln!(svg, r#"<text x="{:.1}" y="{y:.1}" text-anchor="end" font-size="10">{v:.3}</text>"#, LEFT - 6.0);
        }
    }

    for (i, s) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let (lo, hi) = y_range(s);
        if !s.points.is_empty() {
            let pts: Vec<String> = s
                .points
                .iter()
                .map(|&(x, y)| format!("{:.2},{:.2}", LEFT + (x - x0) / x_span * plot_w, by - (y - lo) / (hi - lo) * plot_h))
                .collect();
            let _ = writeln!(svg, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#, pts.join(" "));
        }
        let ly = TOP + 14.0 + 16.0 * i as f64;
        let lx = WIDTH - RIGHT + 10.0;
        let label = if shared { s.name.clone() } else { format!("{} [{lo:.3}, {hi:.3}]", s.name) };
        let _ = writeln!(svg, r#"<text x="{lx:.1}" y="{ly:.1}" font-size="11" fill="{color}">{label}</text>"#);
    }
    svg.push_str("</svg>\n");
    svg
}
