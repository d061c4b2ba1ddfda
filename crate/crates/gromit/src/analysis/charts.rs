//! Minimal deterministic SVG chart rendering for the report bundle.
//!
//! Hand-rolled on purpose: the charts are static vector files whose bytes
//! must be a pure function of the data.

use std::fmt::Write as _;

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 420.0;
const MARGIN_LEFT: f64 = 70.0;
const MARGIN_RIGHT: f64 = 20.0;
const MARGIN_TOP: f64 = 40.0;
const MARGIN_BOTTOM: f64 = 60.0;

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

fn fmt(v: f64) -> String {
    format!("{v:.2}")
}

struct Scale {
    min: f64,
    max: f64,
    pixel_lo: f64,
    pixel_hi: f64,
}

impl Scale {
    fn map(&self, v: f64) -> f64 {
        if (self.max - self.min).abs() < f64::EPSILON {
            return (self.pixel_lo + self.pixel_hi) / 2.0;
        }
        self.pixel_lo + (v - self.min) / (self.max - self.min) * (self.pixel_hi - self.pixel_lo)
    }
}

fn svg_open(title: &str, x_label: &str, y_label: &str) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\">"
    );
    let _ = writeln!(
        out,
        "<rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>"
    );
    let _ = writeln!(
        out,
        "<text x=\"{}\" y=\"24\" font-family=\"sans-serif\" font-size=\"16\" text-anchor=\"middle\">{title}</text>",
        WIDTH / 2.0
    );
    let _ = writeln!(
        out,
        "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\">{x_label}</text>",
        WIDTH / 2.0,
        HEIGHT - 12.0
    );
    let _ = writeln!(
        out,
        "<text x=\"16\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\" transform=\"rotate(-90 16 {})\">{y_label}</text>",
        HEIGHT / 2.0,
        HEIGHT / 2.0
    );
    out
}

fn axes(out: &mut String, x: &Scale, y: &Scale) {
    let _ = writeln!(
        out,
        "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>",
        fmt(MARGIN_LEFT),
        fmt(HEIGHT - MARGIN_BOTTOM),
        fmt(WIDTH - MARGIN_RIGHT),
        fmt(HEIGHT - MARGIN_BOTTOM)
    );
    let _ = writeln!(
        out,
        "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>",
        fmt(MARGIN_LEFT),
        fmt(MARGIN_TOP),
        fmt(MARGIN_LEFT),
        fmt(HEIGHT - MARGIN_BOTTOM)
    );
    for i in 0..=4 {
        let vx = x.min + (x.max - x.min) * i as f64 / 4.0;
        let px = x.map(vx);
        let _ = writeln!(
            out,
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"10\" text-anchor=\"middle\">{}</text>",
            fmt(px),
            fmt(HEIGHT - MARGIN_BOTTOM + 16.0),
            fmt(vx)
        );
        let vy = y.min + (y.max - y.min) * i as f64 / 4.0;
        let py = y.map(vy);
        let _ = writeln!(
            out,
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"10\" text-anchor=\"end\">{}</text>",
            fmt(MARGIN_LEFT - 6.0),
            fmt(py + 3.0),
            fmt(vy)
        );
    }
}

/// A line chart with one or more named series and optional error bars.
pub fn line_chart(
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[(String, Vec<(f64, f64, Option<f64>)>)],
) -> String {
    let points: Vec<(f64, f64, Option<f64>)> = series
        .iter()
        .flat_map(|(_, pts)| pts.iter().copied())
        .collect();
    let mut out = svg_open(title, x_label, y_label);
    if points.is_empty() {
        out.push_str("</svg>\n");
        return out;
    }
    let (mut x_min, mut x_max) = (f64::MAX, f64::MIN);
    let (mut y_min, mut y_max) = (0.0f64, f64::MIN);
    for (px, py, err) in &points {
        x_min = x_min.min(*px);
        x_max = x_max.max(*px);
        let bar = err.unwrap_or(0.0);
        y_min = y_min.min(*py - bar);
        y_max = y_max.max(*py + bar);
    }
    if y_max <= y_min {
        y_max = y_min + 1.0;
    }
    let x = Scale { min: x_min, max: x_max, pixel_lo: MARGIN_LEFT, pixel_hi: WIDTH - MARGIN_RIGHT };
    let y = Scale { min: y_min, max: y_max, pixel_lo: HEIGHT - MARGIN_BOTTOM, pixel_hi: MARGIN_TOP };
    axes(&mut out, &x, &y);
    for (idx, (name, pts)) in series.iter().enumerate() {
        let color = PALETTE[idx % PALETTE.len()];
        let path: Vec<String> = pts
            .iter()
            .map(|(px, py, _)| format!("{},{}", fmt(x.map(*px)), fmt(y.map(*py))))
            .collect();
        if path.len() > 1 {
            let _ = writeln!(
                out,
                "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>",
                path.join(" ")
            );
        }
        for (px, py, err) in pts {
            let _ = writeln!(
                out,
                "<circle cx=\"{}\" cy=\"{}\" r=\"3\" fill=\"{color}\"/>",
                fmt(x.map(*px)),
                fmt(y.map(*py))
            );
            if let Some(half) = err {
                let _ = writeln!(
                    out,
                    "<line x1=\"{0}\" y1=\"{1}\" x2=\"{0}\" y2=\"{2}\" stroke=\"{color}\" stroke-width=\"1\"/>",
                    fmt(x.map(*px)),
                    fmt(y.map(*py - half)),
                    fmt(y.map(*py + half))
                );
            }
        }
        let _ = writeln!(
            out,
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" fill=\"{color}\">{name}</text>",
            fmt(WIDTH - MARGIN_RIGHT - 150.0),
            fmt(MARGIN_TOP + 14.0 * idx as f64)
        );
    }
    out.push_str("</svg>\n");
    out
}

/// Five-number summary for one box of a box plot.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxStats {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

/// Side-by-side box plot of latency distributions (violin-style summary).
pub fn box_plot(title: &str, y_label: &str, boxes: &[(String, BoxStats)]) -> String {
    let mut out = svg_open(title, "", y_label);
    if boxes.is_empty() {
        out.push_str("</svg>\n");
        return out;
    }
    let y_min = 0.0f64;
    let y_max = boxes.iter().map(|(_, b)| b.max).fold(f64::MIN, f64::max).max(1.0);
    let y = Scale { min: y_min, max: y_max, pixel_lo: HEIGHT - MARGIN_BOTTOM, pixel_hi: MARGIN_TOP };
    let x = Scale {
        min: 0.0,
        max: boxes.len() as f64,
        pixel_lo: MARGIN_LEFT,
        pixel_hi: WIDTH - MARGIN_RIGHT,
    };
    axes(&mut out, &Scale { min: 0.0, max: 0.0, pixel_lo: MARGIN_LEFT, pixel_hi: WIDTH - MARGIN_RIGHT }, &y);
    let box_width = ((WIDTH - MARGIN_LEFT - MARGIN_RIGHT) / boxes.len() as f64 * 0.5).min(80.0);
    for (idx, (name, b)) in boxes.iter().enumerate() {
        let color = PALETTE[idx % PALETTE.len()];
        let center = x.map(idx as f64 + 0.5);
        let (lo, hi) = (center - box_width / 2.0, center + box_width / 2.0);
        // Whiskers.
        let _ = writeln!(
            out,
            "<line x1=\"{0}\" y1=\"{1}\" x2=\"{0}\" y2=\"{2}\" stroke=\"{color}\"/>",
            fmt(center),
            fmt(y.map(b.min)),
            fmt(y.map(b.q1))
        );
        let _ = writeln!(
            out,
            "<line x1=\"{0}\" y1=\"{1}\" x2=\"{0}\" y2=\"{2}\" stroke=\"{color}\"/>",
            fmt(center),
            fmt(y.map(b.q3)),
            fmt(y.map(b.max))
        );
        // Interquartile box and median.
        let _ = writeln!(
            out,
            "<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"{color}\" fill-opacity=\"0.25\" stroke=\"{color}\"/>",
            fmt(lo),
            fmt(y.map(b.q3)),
            fmt(hi - lo),
            fmt((y.map(b.q1) - y.map(b.q3)).abs())
        );
        let _ = writeln!(
            out,
            "<line x1=\"{}\" y1=\"{1}\" x2=\"{2}\" y2=\"{1}\" stroke=\"{color}\" stroke-width=\"2\"/>",
            fmt(lo),
            fmt(y.map(b.median)),
            fmt(hi)
        );
        let _ = writeln!(
            out,
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"middle\">{name}</text>",
            fmt(center),
            fmt(HEIGHT - MARGIN_BOTTOM + 32.0)
        );
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn charts_are_deterministic_and_well_formed() {
        let series = vec![(
            "fabric".to_string(),
            vec![(100.0, 250.0, Some(12.0)), (200.0, 260.0, Some(8.0))],
        )];
        let a = line_chart("latency vs rate", "tx/s", "ms", &series);
        let b = line_chart("latency vs rate", "tx/s", "ms", &series);
        assert_eq!(a, b);
        assert!(a.starts_with("<svg"));
        assert!(a.trim_end().ends_with("</svg>"));
        assert!(a.contains("polyline"));

        let boxes = vec![(
            "200tx".to_string(),
            BoxStats { min: 10.0, q1: 120.0, median: 250.0, q3: 370.0, max: 490.0 },
        )];
        let plot = box_plot("latencies", "ms", &boxes);
        assert!(plot.contains("rect"));
        assert!(plot.trim_end().ends_with("</svg>"));
    }

    #[test]
    fn empty_inputs_render_empty_charts() {
        assert!(line_chart("t", "x", "y", &[]).contains("</svg>"));
        assert!(box_plot("t", "y", &[]).contains("</svg>"));
    }
}
