//! Small SVG emitters: line charts and choropleths. Output depends only on
//! the inputs, but plots are not part of any byte-identity contract.

use std::fmt::Write as _;

use crate::geometry::SpatialGrid;

const W: f64 = 640.0;
const H: f64 = 360.0;
const PAD_L: f64 = 60.0;
const PAD_R: f64 = 20.0;
const PAD_T: f64 = 36.0;
const PAD_B: f64 = 44.0;

pub struct Series<'a> {
    pub label: &'a str,
    pub color: &'a str,
    pub points: Vec<(f64, f64)>,
    /// Draw as a step function (piecewise constant between points).
    pub step: bool,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn range(vals: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) =
        vals.filter(|v| v.is_finite()).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-300 {
        return (lo - 0.5, hi + 0.5);
    }
    (lo, hi)
}

fn header(out: &mut String, width: f64, height: f64, title: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
        width / 2.0,
        escape(title)
    );
}

/// Line chart with axes, tick labels and a legend.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series<'_>]) -> String {
    let (x0, x1) = range(series.iter().flat_map(|s| s.points.iter().map(|p| p.0)));
    let (y0, y1) = range(series.iter().flat_map(|s| s.points.iter().map(|p| p.1)));
    let sx = |x: f64| PAD_L + (x - x0) / (x1 - x0) * (W - PAD_L - PAD_R);
    let sy = |y: f64| H - PAD_B - (y - y0) / (y1 - y0) * (H - PAD_T - PAD_B);
    let mut out = String::new();
    header(&mut out, W, H, title);
    let _ = writeln!(
        out,
        r#"<path d="M{l} {t} V{b} H{r}" fill="none" stroke="black"/>"#,
        l = PAD_L,
        t = PAD_T,
        b = H - PAD_B,
        r = W - PAD_R
    );
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            sx(xv),
            H - PAD_B + 16.0,
            fmt_tick(xv)
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
            PAD_L - 6.0,
            sy(yv) + 4.0,
            fmt_tick(yv)
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
        (PAD_L + W - PAD_R) / 2.0,
        H - 8.0,
        escape(x_label)
    );
    let _ = writeln!(
        out,
        r#"<text transform="translate(14 {:.1}) rotate(-90)" text-anchor="middle">{}</text>"#,
        (PAD_T + H - PAD_B) / 2.0,
        escape(y_label)
    );
    for (k, s) in series.iter().enumerate() {
        let mut d = String::new();
        for (i, &(x, y)) in s.points.iter().enumerate() {
            if i == 0 {
                let _ = write!(d, "M{:.2} {:.2}", sx(x), sy(y));
            } else if s.step {
                let _ = write!(d, " H{:.2} V{:.2}", sx(x), sy(y));
            } else {
                let _ = write!(d, " L{:.2} {:.2}", sx(x), sy(y));
            }
        }
        let _ = writeln!(out, r#"<path d="{d}" fill="none" stroke="{}" stroke-width="1.5"/>"#, s.color);
        let ly = PAD_T + 14.0 * k as f64;
        let _ = writeln!(
            out,
            r#"<line x1="{a:.1}" y1="{ly:.1}" x2="{b:.1}" y2="{ly:.1}" stroke="{c}" stroke-width="2"/><text x="{t:.1}" y="{ty:.1}">{l}</text>"#,
            a = W - PAD_R - 120.0,
            b = W - PAD_R - 100.0,
            c = s.color,
            t = W - PAD_R - 94.0,
            ty = ly + 4.0,
            l = escape(s.label)
        );
    }
    out.push_str("</svg>\n");
    out
}

fn fmt_tick(v: f64) -> String {
    if v != 0.0 && (v.abs() < 1e-2 || v.abs() >= 1e4) {
        format!("{v:.1e}")
    } else {
        format!("{v:.3}")
    }
}

/// Yellow-to-red ramp on `[0, 1]`.
fn ramp(t: f64) -> String {
    let t = t.clamp(0.0, 1.0);
    let r = 255.0;
    let g = 230.0 - 200.0 * t;
    let b = 160.0 - 140.0 * t;
    format!("#{:02x}{:02x}{:02x}", r as u8, g as u8, b as u8)
}

/// Per-cell choropleth on a regular 1-D or 2-D grid; `None` otherwise.
pub fn choropleth(title: &str, grid: &SpatialGrid, cell_values: &[f64]) -> Option<String> {
    if grid.dim() > 2 || cell_values.len() != grid.len() {
        return None;
    }
    let bbox = grid.bbox();
    let (bx0, bx1) = (bbox.lo[0], bbox.hi[0]);
    let (by0, by1) = if grid.dim() == 2 { (bbox.lo[1], bbox.hi[1]) } else { (0.0, 1.0) };
    let (v0, v1) = range(cell_values.iter().copied());
    let size = 480.0;
    let aspect = if grid.dim() == 2 { (by1 - by0) / (bx1 - bx0) } else { 0.15 };
    let (pw, ph) = (size, size * aspect);
    let (w, h) = (pw + 2.0 * PAD_R + 80.0, ph + PAD_T + 20.0);
    let mut out = String::new();
    header(&mut out, w, h, title);
    for (c, &value) in cell_values.iter().enumerate() {
        let (lo, hi) = grid.cell_bounds(c)?;
        let (y_lo, y_hi) = if grid.dim() == 2 { (lo[1], hi[1]) } else { (by0, by1) };
        let x = PAD_R + (lo[0] - bx0) / (bx1 - bx0) * pw;
        let y = PAD_T + (by1 - y_hi) / (by1 - by0) * ph;
        let cw = (hi[0] - lo[0]) / (bx1 - bx0) * pw;
        let ch = (y_hi - y_lo) / (by1 - by0) * ph;
        let _ = writeln!(
            out,
            r#"<rect x="{x:.2}" y="{y:.2}" width="{cw:.2}" height="{ch:.2}" fill="{}"/>"#,
            ramp((value - v0) / (v1 - v0))
        );
    }
    let lx = PAD_R + pw + 20.0;
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let y = PAD_T + (1.0 - f) * (ph - 12.0);
        let _ = writeln!(
            out,
            r#"<rect x="{lx:.1}" y="{y:.1}" width="12" height="12" fill="{}"/><text x="{:.1}" y="{:.1}">{}</text>"#,
            ramp(f),
            lx + 16.0,
            y + 10.0,
            fmt_tick(v0 + f * (v1 - v0))
        );
    }
    out.push_str("</svg>\n");
    Some(out)
}
