//! Phase-plane data and a small SVG renderer for (x, θ) plots.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::{DMatrix, Vector2};

use crate::error::{Error, Result};

/// Points of `{sᵀPs = 1}` on the slice `v = ω = 0`, as `(x, θ)` pairs.
pub fn envelope_polyline(p: &DMatrix<f64>, count: usize) -> Result<Vec<(f64, f64)>> {
    if p.shape() != (4, 4) {
        return Err(Error::Structural(format!("expected a 4x4 envelope, got {:?}", p.shape())));
    }
    let slice = nalgebra::Matrix2::new(p[(0, 0)], p[(0, 2)], p[(2, 0)], p[(2, 2)]);
    let chol = nalgebra::Cholesky::new(slice)
        .ok_or_else(|| Error::Numerical("envelope slice is not positive definite".into()))?;
    // With M = LLᵀ, u = L⁻ᵀc has uᵀMu = |c|² = 1.
    let lt_inv = chol
        .l()
        .transpose()
        .try_inverse()
        .ok_or_else(|| Error::Numerical("singular envelope slice".into()))?;
    Ok((0..=count)
        .map(|k| {
            let t = 2.0 * std::f64::consts::PI * k as f64 / count as f64;
            let u = lt_inv * Vector2::new(t.cos(), t.sin());
            (u[0], u[1])
        })
        .collect())
}

pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Phase plot with the envelope slice and the safety box `|x| ≤ bx`, `|θ| ≤ bt`.
pub fn phase_svg(
    title: &str,
    series: &[Series],
    envelope: &[(f64, f64)],
    safety_box: (f64, f64),
    meta: &BTreeMap<String, String>,
) -> String {
    let (w, h, pad) = (640.0, 480.0, 50.0);
    let (bx, bt) = safety_box;
    let mut xr = bx * 1.15;
    let mut tr = bt * 1.15;
    for (x, t) in series.iter().flat_map(|s| s.points.iter()).chain(envelope) {
        if x.is_finite() && t.is_finite() {
            xr = xr.max(x.abs() * 1.05);
            tr = tr.max(t.abs() * 1.05);
        }
    }
    let sx = |x: f64| pad + (x + xr) / (2.0 * xr) * (w - 2.0 * pad);
    let sy = |t: f64| h - pad - (t + tr) / (2.0 * tr) * (h - 2.0 * pad);
    let path = |pts: &[(f64, f64)]| {
        pts.iter()
            .filter(|(x, t)| x.is_finite() && t.is_finite())
            .map(|(x, t)| format!("{:.2},{:.2}", sx(*x), sy(*t)))
            .collect::<Vec<_>>()
            .join(" ")
    };
    let mut out = String::new();
    let _ = writeln!(out, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    for (k, v) in meta {
        let _ = writeln!(out, "<!-- {}={} -->", escape(k), escape(v));
    }
    let _ = writeln!(out, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{}" y="24" font-family="sans-serif" font-size="15" text-anchor="middle">{}</text>"#,
        w / 2.0,
        escape(title)
    );
    let _ = writeln!(
        out,
        r##"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="none" stroke="#444" stroke-dasharray="6,4"/>"##,
        sx(-bx),
        sy(bt),
        sx(bx) - sx(-bx),
        sy(-bt) - sy(bt)
    );
    let _ = writeln!(out, r##"<polyline points="{}" fill="none" stroke="#000" stroke-width="1.5"/>"##, path(envelope));
    for (i, s) in series.iter().enumerate() {
        let c = PALETTE[i % PALETTE.len()];
        let _ = writeln!(out, r#"<polyline points="{}" fill="none" stroke="{c}" stroke-width="1.2"/>"#, path(&s.points));
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" font-family="sans-serif" font-size="12" fill="{c}">{}</text>"#,
            w - pad - 150.0,
            pad + 16.0 * i as f64,
            escape(&s.label)
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" font-family="sans-serif" font-size="12" text-anchor="middle">x [m]  (envelope: slice v = omega = 0; dashed: safety box)</text>"#,
        w / 2.0,
        h - 12.0
    );
    let _ = writeln!(
        out,
        r#"<text x="14" y="{}" font-family="sans-serif" font-size="12" transform="rotate(-90 14 {})">theta [rad]</text>"#,
        h / 2.0,
        h / 2.0
    );
    out.push_str("</svg>\n");
    out
}
