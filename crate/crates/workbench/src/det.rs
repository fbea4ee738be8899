//! DET curve export: raw operating points as CSV and a normal-deviate plot
//! as SVG.

use std::collections::HashMap;
use std::fmt::Write as _;

use axvec_core::backend::Score;
use axvec_core::data::Trial;
use axvec_core::metrics::{det_points, eer_from_points, DetPoint, LabeledScores};
use axvec_core::{Error, Result};
use statrs::distribution::{ContinuousCDF, Normal};

pub fn points_for(scores: &[Score], trials: &[Trial]) -> Result<Vec<DetPoint>> {
    let lookup: HashMap<(&str, &str), f64> = scores
        .iter()
        .map(|s| ((s.enroll.as_str(), s.test.as_str()), s.score))
        .collect();
    let (mut tar, mut non) = (Vec::new(), Vec::new());
    for t in trials {
        let s = *lookup
            .get(&(t.enroll.as_str(), t.test.as_str()))
            .ok_or_else(|| Error::Missing(format!("score for trial {} {}", t.enroll, t.test)))?;
        if t.target {
            tar.push(s);
        } else {
            non.push(s);
        }
    }
    det_points(&LabeledScores::new(tar, non)?)
}

/// One row per operating point, values printed with full precision.
pub fn to_csv(points: &[DetPoint]) -> String {
    let mut out = String::from("threshold,p_fa,p_miss\n");
    for p in points {
        let _ = writeln!(out, "{},{},{}", p.threshold, p.p_fa, p.p_miss);
    }
    out
}

const WIDTH: f64 = 480.0;
const HEIGHT: f64 = 480.0;
const MARGIN: f64 = 60.0;
const P_MIN: f64 = 1e-3;
const P_MAX: f64 = 0.5;
const TICKS: [f64; 8] = [0.001, 0.005, 0.01, 0.02, 0.05, 0.1, 0.2, 0.4];
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

fn probit(p: f64) -> f64 {
    let n = Normal::standard();
    n.inverse_cdf(p.clamp(P_MIN, P_MAX))
}

fn axis(p: f64) -> f64 {
    let (lo, hi) = (probit(P_MIN), probit(P_MAX));
    (probit(p) - lo) / (hi - lo) * (WIDTH - 2.0 * MARGIN)
}

/// Miss rate against false-alarm rate on probit axes, one polyline per
/// system.
pub fn to_svg(curves: &[(String, Vec<DetPoint>)]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let x0 = MARGIN;
    let y0 = HEIGHT - MARGIN;
    let span = WIDTH - 2.0 * MARGIN;
    for t in TICKS {
        let v = axis(t);
        let label = format!("{}", t * 100.0);
        let _ = writeln!(
            s,
            r##"<line x1="{x:.1}" y1="{top:.1}" x2="{x:.1}" y2="{y0:.1}" stroke="#ddd"/><text x="{x:.1}" y="{ty:.1}" text-anchor="middle">{label}</text>"##,
            x = x0 + v,
            top = MARGIN,
            ty = y0 + 15.0
        );
        let _ = writeln!(
            s,
            r##"<line x1="{x0:.1}" y1="{y:.1}" x2="{right:.1}" y2="{y:.1}" stroke="#ddd"/><text x="{tx:.1}" y="{y:.1}" text-anchor="end" dominant-baseline="middle">{label}</text>"##,
            y = y0 - v,
            right = x0 + span,
            tx = x0 - 5.0
        );
    }
    let _ = writeln!(
        s,
        r#"<rect x="{x0}" y="{MARGIN}" width="{span}" height="{span}" fill="none" stroke="black"/>"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">False alarm rate (%)</text>"#,
        x0 + span / 2.0,
        HEIGHT - 20.0
    );
    let _ = writeln!(
        s,
        r#"<text transform="translate(18 {:.1}) rotate(-90)" text-anchor="middle">Miss rate (%)</text>"#,
        MARGIN + span / 2.0
    );
    for (i, (name, points)) in curves.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let mut path = String::new();
        for p in points {
            let _ = write!(path, "{:.2},{:.2} ", x0 + axis(p.p_fa), y0 - axis(p.p_miss));
        }
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            path.trim_end()
        );
        let ly = MARGIN + 15.0 + 15.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<line x1="{:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="2"/><text x="{:.1}" y="{ly:.1}" dominant-baseline="middle">{} (EER {:.2}%)</text>"#,
            x0 + span - 150.0,
            x0 + span - 130.0,
            x0 + span - 125.0,
            escape(name),
            100.0 * eer_from_points(points)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
