//! Minimal SVG rendering of response curves.

use std::fmt::Write;

use earlyvision::io::abscissa_column;
use earlyvision::neurophys::{Experiment, ResponseCurve};

const W: f64 = 480.0;
const H: f64 = 320.0;
const MARGIN: f64 = 48.0;

/// Line plot of one curve; SF and size axes are logarithmic.
pub fn curve_svg(curve: &ResponseCurve) -> String {
    let log_x = curve.experiment != Experiment::ContrastResponse;
    let xs: Vec<f64> = curve
        .abscissa
        .iter()
        .map(|&x| if log_x { x.max(1e-12).log10() } else { x })
        .collect();
    let (x0, x1) = bounds(&xs);
    let (_, y1) = bounds(&curve.f1);
    let y1 = if y1 > 0.0 { y1 } else { 1.0 };
    let px = |x: f64| MARGIN + (x - x0) / (x1 - x0).max(1e-12) * (W - 2.0 * MARGIN);
    let py = |y: f64| H - MARGIN - y / y1 * (H - 2.0 * MARGIN);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<path d="M{m} {b} H{r} M{m} {b} V{m}" stroke="black" fill="none"/>"#,
        m = MARGIN,
        b = H - MARGIN,
        r = W - MARGIN
    );
    let points: Vec<String> = xs
        .iter()
        .zip(&curve.f1)
        .map(|(&x, &y)| format!("{:.2},{:.2}", px(x), py(y)))
        .collect();
    let _ = writeln!(
        s,
        r#"<polyline points="{}" stroke="steelblue" stroke-width="2" fill="none"/>"#,
        points.join(" ")
    );
    for p in &points {
        let (x, y) = p.split_once(',').expect("formatted pair");
        let _ = writeln!(s, r#"<circle cx="{x}" cy="{y}" r="3" fill="steelblue"/>"#);
    }
    let label = if log_x {
        format!("log10 {}", abscissa_column(curve.experiment))
    } else {
        abscissa_column(curve.experiment).to_string()
    };
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" font-size="12" text-anchor="middle">{label}</text>"#,
        W / 2.0,
        H - 12.0
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{}" font-size="12" transform="rotate(-90 14 {})" text-anchor="middle">F1 (max {y1:.4})</text>"#,
        H / 2.0,
        H / 2.0
    );
    s.push_str("</svg>\n");
    s
}

fn bounds(v: &[f64]) -> (f64, f64) {
    v.iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| {
            (lo.min(x), hi.max(x))
        })
}
