//! Static SVG plots of a predictive field against the truth.

use std::fmt::Write;

use crate::field::{Block, FineField};
use crate::surrogate::PredictiveField;

const PANEL: f64 = 240.0;
const GAP: f64 = 30.0;
const TOP: f64 = 40.0;
const MAX_CELLS: usize = 64;

const RAMP: [(f64, [f64; 3]); 5] = [
    (0.0, [68.0, 1.0, 84.0]),
    (0.25, [59.0, 82.0, 139.0]),
    (0.5, [33.0, 145.0, 140.0]),
    (0.75, [94.0, 201.0, 98.0]),
    (1.0, [253.0, 231.0, 37.0]),
];

fn color(t: f64) -> String {
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 0.0 };
    let i = RAMP.iter().rposition(|(s, _)| *s <= t).unwrap_or(0).min(RAMP.len() - 2);
    let (s0, c0) = RAMP[i];
    let (s1, c1) = RAMP[i + 1];
    let w = (t - s0) / (s1 - s0);
    let c: Vec<u8> = (0..3).map(|k| (c0[k] + w * (c1[k] - c0[k])).round() as u8).collect();
    format!("#{:02x}{:02x}{:02x}", c[0], c[1], c[2])
}

fn heatmap(out: &mut String, x0: f64, title: &str, values: &[f64], fluid: &[bool], g: usize, range: (f64, f64)) {
    let cells = g.min(MAX_CELLS);
    let step = g / cells;
    let size = PANEL / cells as f64;
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" font-size="13" font-family="sans-serif">{title}</text>"#,
        x0,
        TOP - 8.0
    );
    for cy in 0..cells {
        for cx in 0..cells {
            let (ix, iy) = (cx * step + step / 2, cy * step + step / 2);
            let k = iy * g + ix;
            let fill = if fluid[k] {
                color((values[k] - range.0) / (range.1 - range.0).max(1e-300))
            } else {
                "#b0b0b0".to_string()
            };
            // y grows upwards in the domain
            let _ = writeln!(
                out,
                r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="{fill}"/>"#,
                x0 + cx as f64 * size,
                TOP + (cells - 1 - cy) as f64 * size,
                size + 0.05,
                size + 0.05
            );
        }
    }
}

fn range_of(values: &[f64], fluid: &[bool]) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for (v, &f) in values.iter().zip(fluid) {
        if f {
            lo = lo.min(*v);
            hi = hi.max(*v);
        }
    }
    if lo.is_finite() {
        (lo, hi)
    } else {
        (0.0, 1.0)
    }
}

/// Truth, predictive mean and predictive standard deviation of one block as
/// heatmaps, plus the mid-height profile with the `mean +- 1 sd` band.
pub fn prediction_svg(title: &str, block: Block, truth: &FineField, pred: &PredictiveField) -> String {
    let g = truth.grid_size;
    let fluid = &truth.fluid;
    let (t, m, s) = (truth.block(block), pred.mean.block(block), pred.std.block(block));
    let shared = {
        let (a, b) = range_of(t, fluid);
        let (c, d) = range_of(m, fluid);
        (a.min(c), b.max(d))
    };
    let width = 4.0 * PANEL + 5.0 * GAP;
    let height = TOP + PANEL + 50.0;
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" viewBox="0 0 {width:.0} {height:.0}">"#
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{GAP:.1}" y="18" font-size="15" font-family="sans-serif">{title} ({})</text>"#,
        block.name()
    );
    heatmap(&mut out, GAP, "truth", t, fluid, g, shared);
    heatmap(&mut out, 2.0 * GAP + PANEL, "predictive mean", m, fluid, g, shared);
    heatmap(&mut out, 3.0 * GAP + 2.0 * PANEL, "predictive sd", s, fluid, g, range_of(s, fluid));

    // mid-height profile
    let x0 = 4.0 * GAP + 3.0 * PANEL;
    let row = g / 2;
    let idx = |ix: usize| row * g + ix;
    let pts: Vec<usize> = (0..g).filter(|&ix| fluid[idx(ix)]).collect();
    let _ = writeln!(
        out,
        r#"<text x="{x0:.1}" y="{:.1}" font-size="13" font-family="sans-serif">profile at y = 0.5</text>"#,
        TOP - 8.0
    );
    let _ = writeln!(
        out,
        r##"<rect x="{x0:.1}" y="{TOP:.1}" width="{PANEL:.1}" height="{PANEL:.1}" fill="none" stroke="#444"/>"##
    );
    if !pts.is_empty() {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &ix in &pts {
            let k = idx(ix);
            lo = lo.min(t[k]).min(m[k] - s[k]);
            hi = hi.max(t[k]).max(m[k] + s[k]);
        }
        let span = (hi - lo).max(1e-300);
        let px = |ix: usize| x0 + (ix as f64 + 0.5) / g as f64 * PANEL;
        let py = |v: f64| TOP + PANEL - (v - lo) / span * PANEL;
        let mut band = String::new();
        for &ix in &pts {
            let k = idx(ix);
            let _ = write!(band, "{:.2},{:.2} ", px(ix), py(m[k] + s[k]));
        }
        for &ix in pts.iter().rev() {
            let k = idx(ix);
            let _ = write!(band, "{:.2},{:.2} ", px(ix), py(m[k] - s[k]));
        }
        let _ = writeln!(
            out,
            r##"<polygon points="{}" fill="#9e9e9e" fill-opacity="0.45"/>"##,
            band.trim_end()
        );
        let line = |vals: &[f64]| {
            pts.iter()
                .map(|&ix| format!("{:.2},{:.2}", px(ix), py(vals[idx(ix)])))
                .collect::<Vec<_>>()
                .join(" ")
        };
        let _ = writeln!(
            out,
            r##"<polyline points="{}" fill="none" stroke="#1f4fbf" stroke-width="1.5"/>"##,
            line(m)
        );
        let _ = writeln!(
            out,
            r##"<polyline points="{}" fill="none" stroke="#d9480f" stroke-width="1.2"/>"##,
            line(t)
        );
    }
    let _ = writeln!(
        out,
        r##"<text x="{x0:.1}" y="{:.1}" font-size="11" font-family="sans-serif"><tspan fill="#d9480f">truth</tspan>  <tspan fill="#1f4fbf">mean</tspan>  <tspan fill="#777">mean +- 1 sd</tspan></text>"##,
        TOP + PANEL + 18.0
    );
    let _ = writeln!(out, "</svg>");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_deterministically() {
        let mut truth = FineField::zeros(16);
        for i in 0..256 {
            truth.pressure[i] = 1.0 - (i % 16) as f64 / 16.0;
        }
        truth.fluid[17] = false;
        truth.pressure[17] = 0.0;
        let mut std = truth.clone();
        std.pressure.iter_mut().for_each(|v| *v = 0.05);
        let pred = PredictiveField {
            mean: truth.clone(),
            std,
            samples: 2,
        };
        let a = prediction_svg("t", Block::Pressure, &truth, &pred);
        let b = prediction_svg("t", Block::Pressure, &truth, &pred);
        assert_eq!(a, b);
        assert!(a.starts_with("<svg") && a.trim_end().ends_with("</svg>"));
        assert_eq!(a.matches("<rect").count(), 1 + 3 * 256 + 1);
        assert!(a.contains("#b0b0b0"));
    }

    #[test]
    fn color_ramp_ends() {
        assert_eq!(color(0.0), "#440154");
        assert_eq!(color(1.0), "#fde725");
        assert_eq!(color(f64::NAN), "#440154");
    }
}
