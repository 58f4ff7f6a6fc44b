//! Minimal SVG renderings of 2D samples and vector fields.

use std::fmt::Write;

use crate::autodiff::Tensor;

use super::ResidualField;

const SIZE: f64 = 480.0;
const PAD: f64 = 20.0;

pub const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf", "#8c564b", "#7f7f7f",
];

struct Frame {
    min: [f64; 2],
    max: [f64; 2],
}

impl Frame {
    fn fit(points: impl Iterator<Item = [f64; 2]>) -> Self {
        let mut min = [f64::INFINITY; 2];
        let mut max = [f64::NEG_INFINITY; 2];
        for p in points.filter(|p| p[0].is_finite() && p[1].is_finite()) {
            for k in 0..2 {
                min[k] = min[k].min(p[k]);
                max[k] = max[k].max(p[k]);
            }
        }
        for k in 0..2 {
            if !min[k].is_finite() {
                (min[k], max[k]) = (-1.0, 1.0);
            } else if max[k] - min[k] < 1e-9 {
                min[k] -= 1.0;
                max[k] += 1.0;
            }
        }
        Frame { min, max }
    }

    fn scale(&self) -> f64 {
        let span = (self.max[0] - self.min[0]).max(self.max[1] - self.min[1]);
        (SIZE - 2.0 * PAD) / span
    }

    fn map(&self, p: [f64; 2]) -> (f64, f64) {
        let s = self.scale();
        (
            PAD + (p[0] - self.min[0]) * s,
            SIZE - PAD - (p[1] - self.min[1]) * s,
        )
    }
}

fn header(out: &mut String) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">"#
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
}

fn rows2(t: &Tensor) -> impl Iterator<Item = [f64; 2]> + '_ {
    (0..t.shape()[0]).map(move |i| {
        let r = t.row(i);
        [f64::from(r[0]), f64::from(r[1])]
    })
}

/// Overlaid scatter of named 2D point sets.
pub fn scatter_svg(series: &[(&str, &Tensor)]) -> String {
    let frame = Frame::fit(series.iter().flat_map(|(_, t)| rows2(t)));
    let mut out = String::new();
    header(&mut out);
    for (k, (name, points)) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let _ = writeln!(
            out,
            r#"<g fill="{color}" fill-opacity="0.5"><title>{name}</title>"#
        );
        for p in rows2(points) {
            let (x, y) = frame.map(p);
            let _ = writeln!(out, r#"<circle cx="{x:.2}" cy="{y:.2}" r="1.6"/>"#);
        }
        out.push_str("</g>\n");
        let _ = writeln!(
            out,
            r#"<text x="{PAD}" y="{:.0}" font-size="12" fill="{color}">{name}</text>"#,
            PAD + 14.0 * (k as f64 + 1.0)
        );
    }
    out.push_str("</svg>\n");
    out
}

/// Arrows for every grid point, scaled so the longest spans one cell.
pub fn quiver_svg(field: &ResidualField) -> String {
    let frame = Frame::fit(
        field
            .points
            .iter()
            .map(|p| [f64::from(p[0]), f64::from(p[1])]),
    );
    let longest = field
        .vectors
        .iter()
        .map(|v| f64::from(v[0]).hypot(f64::from(v[1])))
        .fold(0.0, f64::max);
    let cell = (frame.max[0] - frame.min[0]) / (field.grid.n.max(2) - 1) as f64;
    let k = if longest > 0.0 {
        0.9 * cell / longest
    } else {
        0.0
    };
    let mut out = String::new();
    header(&mut out);
    let _ = writeln!(
        out,
        r#"<text x="{PAD}" y="14" font-size="12">residual concept={} t={}</text>"#,
        field.concept, field.t
    );
    out.push_str("<g stroke=\"#1f77b4\" stroke-width=\"1\">\n");
    for (p, v) in field.points.iter().zip(&field.vectors) {
        let a = [f64::from(p[0]), f64::from(p[1])];
        let b = [a[0] + k * f64::from(v[0]), a[1] + k * f64::from(v[1])];
        let (x1, y1) = frame.map(a);
        let (x2, y2) = frame.map(b);
        let _ = writeln!(
            out,
            r#"<line x1="{x1:.2}" y1="{y1:.2}" x2="{x2:.2}" y2="{y2:.2}"/>"#
        );
        let _ = writeln!(
            out,
            r##"<circle cx="{x2:.2}" cy="{y2:.2}" r="1.2" fill="#1f77b4"/>"##
        );
    }
    out.push_str("</g>\n</svg>\n");
    out
}
