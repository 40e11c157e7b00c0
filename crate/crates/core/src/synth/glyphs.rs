//! Stroke-based glyph atlas and its anti-aliased rasterizer.
//!
//! Each template is a set of polylines in a unit box (x right, y down). A
//! glyph is drawn by mapping the box onto a cell, optionally rotating about
//! the cell centre, and covering every pixel within half the stroke width of
//! a centreline. Every template is a single connected shape.

use std::f64::consts::PI;
use std::sync::OnceLock;

#[derive(Debug, Clone)]
pub struct GlyphTemplate {
    pub ch: char,
    /// Width over height of the glyph cell.
    pub aspect: f64,
    pub strokes: Vec<Vec<(f64, f64)>>,
}

impl GlyphTemplate {
    /// Centreline length after mapping the unit box onto `w x h`.
    pub fn stroke_length(&self, w: f64, h: f64) -> f64 {
        self.strokes
            .iter()
            .flat_map(|s| s.windows(2))
            .map(|p| ((p[1].0 - p[0].0) * w).hypot((p[1].1 - p[0].1) * h))
            .sum()
    }
}

fn arc(cx: f64, cy: f64, rx: f64, ry: f64, from_deg: f64, to_deg: f64) -> Vec<(f64, f64)> {
    let n = (((to_deg - from_deg).abs() / 15.0).ceil() as usize).max(2);
    (0..=n)
        .map(|i| {
            let a = (from_deg + (to_deg - from_deg) * i as f64 / n as f64) * PI / 180.0;
            (cx + rx * a.cos(), cy + ry * a.sin())
        })
        .collect()
}

fn line(points: &[(f64, f64)]) -> Vec<(f64, f64)> {
    points.to_vec()
}

fn chain(parts: &[Vec<(f64, f64)>]) -> Vec<(f64, f64)> {
    parts.iter().flatten().copied().collect()
}

fn build_atlas() -> Vec<GlyphTemplate> {
    let g = |ch: char, aspect: f64, strokes: Vec<Vec<(f64, f64)>>| GlyphTemplate { ch, aspect, strokes };
    vec![
        g('A', 0.85, vec![
            line(&[(0.0, 1.0), (0.5, 0.0), (1.0, 1.0)]),
            line(&[(0.24, 0.62), (0.76, 0.62)]),
        ]),
        g('C', 0.8, vec![arc(0.55, 0.5, 0.55, 0.5, -50.0, -310.0)]),
        g('E', 0.7, vec![
            line(&[(1.0, 0.0), (0.0, 0.0), (0.0, 1.0), (1.0, 1.0)]),
            line(&[(0.0, 0.5), (0.8, 0.5)]),
        ]),
        g('F', 0.7, vec![
            line(&[(1.0, 0.0), (0.0, 0.0), (0.0, 1.0)]),
            line(&[(0.0, 0.48), (0.8, 0.48)]),
        ]),
        g('H', 0.8, vec![
            line(&[(0.0, 0.0), (0.0, 1.0)]),
            line(&[(1.0, 0.0), (1.0, 1.0)]),
            line(&[(0.0, 0.5), (1.0, 0.5)]),
        ]),
        g('J', 0.7, vec![chain(&[
            line(&[(0.3, 0.0), (1.0, 0.0), (1.0, 0.62)]),
            arc(0.5, 0.62, 0.5, 0.38, 0.0, 180.0),
        ])]),
        g('K', 0.8, vec![
            line(&[(0.0, 0.0), (0.0, 1.0)]),
            line(&[(1.0, 0.0), (0.0, 0.58)]),
            line(&[(0.38, 0.36), (1.0, 1.0)]),
        ]),
        g('L', 0.7, vec![line(&[(0.0, 0.0), (0.0, 1.0), (1.0, 1.0)])]),
        g('M', 1.0, vec![line(&[(0.0, 1.0), (0.0, 0.0), (0.5, 0.65), (1.0, 0.0), (1.0, 1.0)])]),
        g('N', 0.8, vec![line(&[(0.0, 1.0), (0.0, 0.0), (1.0, 1.0), (1.0, 0.0)])]),
        g('O', 0.85, vec![arc(0.5, 0.5, 0.5, 0.5, 0.0, 360.0)]),
        g('P', 0.75, vec![chain(&[
            line(&[(0.0, 1.0), (0.0, 0.0), (0.6, 0.0)]),
            arc(0.6, 0.27, 0.4, 0.27, -90.0, 90.0),
            line(&[(0.6, 0.54), (0.0, 0.54)]),
        ])]),
        g('R', 0.8, vec![
            chain(&[
                line(&[(0.0, 1.0), (0.0, 0.0), (0.58, 0.0)]),
                arc(0.58, 0.26, 0.38, 0.26, -90.0, 90.0),
                line(&[(0.58, 0.52), (0.0, 0.52)]),
            ]),
            line(&[(0.45, 0.52), (1.0, 1.0)]),
        ]),
        g('S', 0.75, vec![chain(&[
            arc(0.5, 0.25, 0.5, 0.25, -20.0, -270.0),
            arc(0.5, 0.75, 0.5, 0.25, -90.0, 160.0),
        ])]),
        g('T', 0.85, vec![
            line(&[(0.0, 0.0), (1.0, 0.0)]),
            line(&[(0.5, 0.0), (0.5, 1.0)]),
        ]),
        g('U', 0.8, vec![chain(&[
            line(&[(0.0, 0.0), (0.0, 0.55)]),
            arc(0.5, 0.55, 0.5, 0.45, 180.0, 0.0),
            line(&[(1.0, 0.55), (1.0, 0.0)]),
        ])]),
        g('V', 0.85, vec![line(&[(0.0, 0.0), (0.5, 1.0), (1.0, 0.0)])]),
        g('W', 1.15, vec![line(&[(0.0, 0.0), (0.22, 1.0), (0.5, 0.35), (0.78, 1.0), (1.0, 0.0)])]),
        g('X', 0.85, vec![
            line(&[(0.0, 0.0), (1.0, 1.0)]),
            line(&[(1.0, 0.0), (0.0, 1.0)]),
        ]),
        g('Y', 0.85, vec![
            line(&[(0.0, 0.0), (0.5, 0.5), (1.0, 0.0)]),
            line(&[(0.5, 0.5), (0.5, 1.0)]),
        ]),
        g('Z', 0.8, vec![line(&[(0.0, 0.0), (1.0, 0.0), (0.0, 1.0), (1.0, 1.0)])]),
        g('2', 0.75, vec![chain(&[
            arc(0.5, 0.28, 0.5, 0.28, -160.0, 20.0),
            line(&[(0.0, 1.0), (1.0, 1.0)]),
        ])]),
        g('4', 0.8, vec![
            line(&[(0.72, 1.0), (0.72, 0.0), (0.0, 0.68), (1.0, 0.68)]),
        ]),
        g('7', 0.75, vec![line(&[(0.0, 0.0), (1.0, 0.0), (0.3, 1.0)])]),
    ]
}

/// The fixed glyph atlas shared by the synthesizer and the recognizer.
pub fn atlas() -> &'static [GlyphTemplate] {
    static ATLAS: OnceLock<Vec<GlyphTemplate>> = OnceLock::new();
    ATLAS.get_or_init(build_atlas)
}

/// Characters of the atlas, in atlas order.
pub fn charset() -> String {
    atlas().iter().map(|t| t.ch).collect()
}

pub fn template(ch: char) -> Option<&'static GlyphTemplate> {
    atlas().iter().find(|t| t.ch == ch)
}

/// Placement of one glyph on a canvas.
#[derive(Debug, Clone, Copy)]
pub struct GlyphPlacement {
    /// Left edge of the glyph cell.
    pub x: f64,
    /// Top edge of the glyph cell.
    pub y: f64,
    pub width: f64,
    pub height: f64,
    /// Stroke width in pixels.
    pub thickness: f64,
    /// Rotation about the cell centre, radians.
    pub rotation: f64,
}

/// Segments of `t` in canvas coordinates. Centrelines are inset by half the
/// stroke width so the unrotated ink stays inside the cell.
pub fn segments(t: &GlyphTemplate, p: &GlyphPlacement) -> Vec<[(f64, f64); 2]> {
    let half = 0.5 * p.thickness;
    let iw = (p.width - p.thickness).max(0.0);
    let ih = (p.height - p.thickness).max(0.0);
    let (cx, cy) = (p.x + 0.5 * p.width, p.y + 0.5 * p.height);
    let (sin, cos) = p.rotation.sin_cos();
    let map = |(u, v): (f64, f64)| {
        let x = p.x + half + u * iw - cx;
        let y = p.y + half + v * ih - cy;
        (cx + cos * x - sin * y, cy + sin * x + cos * y)
    };
    t.strokes
        .iter()
        .flat_map(|s| s.windows(2).map(|w| [map(w[0]), map(w[1])]).collect::<Vec<_>>())
        .collect()
}

fn dist2_to_segment(px: f64, py: f64, s: &[(f64, f64); 2]) -> f64 {
    let ((ax, ay), (bx, by)) = (s[0], s[1]);
    let (dx, dy) = (bx - ax, by - ay);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((px - ax) * dx + (py - ay) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (qx, qy) = (ax + t * dx - px, ay + t * dy - py);
    qx * qx + qy * qy
}

/// Subsamples per pixel side used for coverage.
const SUPERSAMPLE: usize = 4;

/// Adds the coverage of stroked segments into `alpha` (row-major `h x w`),
/// taking the maximum with what is already there.
pub fn rasterize(alpha: &mut [f64], h: usize, w: usize, segs: &[[(f64, f64); 2]], thickness: f64) {
    if segs.is_empty() {
        return;
    }
    let r2 = (0.5 * thickness).powi(2);
    let pad = 0.5 * thickness + 1.0;
    let (mut x0, mut y0, mut x1, mut y1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
    for s in segs {
        for &(x, y) in s {
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x);
            y1 = y1.max(y);
        }
    }
    let xa = ((x0 - pad).floor().max(0.0)) as usize;
    let ya = ((y0 - pad).floor().max(0.0)) as usize;
    let xb = ((x1 + pad).ceil().max(0.0) as usize).min(w);
    let yb = ((y1 + pad).ceil().max(0.0) as usize).min(h);
    let n = SUPERSAMPLE as f64;
    for y in ya..yb {
        for x in xa..xb {
            let mut hits = 0usize;
            for sy in 0..SUPERSAMPLE {
                let py = y as f64 + (sy as f64 + 0.5) / n;
                for sx in 0..SUPERSAMPLE {
                    let px = x as f64 + (sx as f64 + 0.5) / n;
                    if segs.iter().any(|s| dist2_to_segment(px, py, s) <= r2) {
                        hits += 1;
                    }
                }
            }
            let cov = hits as f64 / (n * n);
            let a = &mut alpha[y * w + x];
            *a = a.max(cov);
        }
    }
}

/// Coverage of one glyph on a fresh `h x w` canvas.
pub fn render_template(t: &GlyphTemplate, p: &GlyphPlacement, h: usize, w: usize) -> Vec<f64> {
    let mut alpha = vec![0.0; h * w];
    rasterize(&mut alpha, h, w, &segments(t, p), p.thickness);
    alpha
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn atlas_is_large_and_unique() {
        let a = atlas();
        assert!(a.len() >= 20);
        let mut chars: Vec<char> = a.iter().map(|t| t.ch).collect();
        chars.sort();
        chars.dedup();
        assert_eq!(chars.len(), a.len());
    }

    #[test]
    fn every_template_draws_ink_inside_its_cell() {
        for t in atlas() {
            let p = GlyphPlacement {
                x: 2.0,
                y: 2.0,
                width: 16.0 * t.aspect,
                height: 16.0,
                thickness: 3.0,
                rotation: 0.0,
            };
            let w = (p.width + 4.0).ceil() as usize;
            let a = render_template(t, &p, 20, w);
            assert!(a.iter().any(|&v| v > 0.5), "{} draws nothing", t.ch);
            for y in 0..20 {
                for x in 0..w {
                    let inside = (x as f64 + 1.0) > p.x && (x as f64) < p.x + p.width + 1.0 && y >= 1 && y <= 18;
                    if !inside {
                        assert_eq!(a[y * w + x], 0.0, "{} leaks at {x},{y}", t.ch);
                    }
                }
            }
        }
    }
}
