use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::harness::{ScalingRecord, Status, Variant};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 56.0;

/// Static line plot of metric against log2 context length, one series per variant.
pub fn write_svg(records: &[ScalingRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, render(records)).map_err(|e| Error::io(path, e))
}

fn render(records: &[ScalingRecord]) -> String {
    let ok: Vec<&ScalingRecord> = records
        .iter()
        .filter(|r| r.status == Status::Ok && r.metric_value.is_some())
        .collect();
    let xs: Vec<f64> = ok.iter().map(|r| (r.context_length as f64).log2()).collect();
    let ys: Vec<f64> = ok.iter().filter_map(|r| r.metric_value).collect();
    let range = |v: &[f64]| {
        let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        match (lo.is_finite(), hi > lo) {
            (false, _) => (0.0, 1.0),
            (true, false) => (lo - 0.5, lo + 0.5),
            (true, true) => (lo, hi),
        }
    };
    let (x0, x1) = range(&xs);
    let (y0, y1) = range(&ys);
    let px = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (WIDTH - 2.0 * MARGIN);
    let py = |y: f64| HEIGHT - MARGIN - (y - y0) / (y1 - y0) * (HEIGHT - 2.0 * MARGIN);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let (left, right, top, bottom) = (MARGIN, WIDTH - MARGIN, MARGIN, HEIGHT - MARGIN);
    let _ = writeln!(
        svg,
        r#"<path d="M{left} {top} L{left} {bottom} L{right} {bottom}" stroke="black" fill="none"/>"#
    );
    let metric = ok
        .first()
        .map_or("metric".to_string(), |r| format!("{:?}", r.metric_name).to_lowercase());
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="middle">log2 context length</text>"#,
        WIDTH / 2.0,
        HEIGHT - 16.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="16" y="{}" transform="rotate(-90 16 {})" text-anchor="middle">{metric}</text>"#,
        HEIGHT / 2.0,
        HEIGHT / 2.0
    );
    for (v, label) in [(y0, y0), (y1, y1)] {
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" text-anchor="end">{label:.4}</text>"#,
            left - 4.0,
            py(v) + 4.0
        );
    }
    for (v, label) in [(x0, x0), (x1, x1)] {
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" text-anchor="middle">{label:.1}</text>"#,
            px(v),
            bottom + 16.0
        );
    }

    for (i, (variant, color)) in [(Variant::Monolithic, "#c0392b"), (Variant::Chunked, "#2471a3")]
        .into_iter()
        .enumerate()
    {
        let points: Vec<String> = ok
            .iter()
            .filter(|r| r.variant == variant)
            .map(|r| {
                let x = (r.context_length as f64).log2();
                format!("{:.2},{:.2}", px(x), py(r.metric_value.unwrap_or(y0)))
            })
            .collect();
        if !points.is_empty() {
            let dash = if variant == Variant::Monolithic {
                r#" stroke-dasharray="6 4""#
            } else {
                ""
            };
            let _ = writeln!(
                svg,
                r#"<polyline points="{}" stroke="{color}" stroke-width="2" fill="none"{dash}/>"#,
                points.join(" ")
            );
        }
        let ly = top + 14.0 * i as f64;
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{ly}" fill="{color}" text-anchor="end">{variant}</text>"#,
            right
        );
    }
    svg.push_str("</svg>\n");
    svg
}
