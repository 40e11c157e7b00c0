//! Deterministic template recognizer for glyph-atlas text.
//!
//! The region is split into ink and background by distance from the median
//! border luma, ink pixels are grouped into 8-connected components, and each
//! component is matched against every atlas template re-rendered into the
//! component's bounding box over a small stroke-width and rotation sweep.

use crate::image::Image;
use crate::synth::glyphs::{render_template, GlyphPlacement, GlyphTemplate};

/// Regions whose strongest ink contrast is below this read as blank.
pub const MIN_CONTRAST: f64 = 0.15;
/// Components smaller than this many pixels are noise.
const MIN_PIXELS: usize = 6;
/// Components smaller than this fraction of the largest are noise.
const MIN_RELATIVE: f64 = 0.15;
/// Stroke-width multipliers tried per template.
const THICKNESS_SWEEP: [f64; 3] = [0.85, 1.0, 1.15];
/// Rotations tried per template, degrees.
const ROTATION_SWEEP: [f64; 3] = [-3.0, 0.0, 3.0];
/// Weight of the log aspect-ratio mismatch in the match score.
const ASPECT_WEIGHT: f64 = 0.5;

#[derive(Debug, Clone)]
struct Component {
    pixels: Vec<(usize, usize)>,
    x0: usize,
    y0: usize,
    x1: usize,
    y1: usize,
}

impl Component {
    fn width(&self) -> usize {
        self.x1 - self.x0 + 1
    }

    fn height(&self) -> usize {
        self.y1 - self.y0 + 1
    }

    fn center(&self) -> (f64, f64) {
        (0.5 * (self.x0 + self.x1) as f64, 0.5 * (self.y0 + self.y1) as f64)
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn components(ink: &[bool], h: usize, w: usize) -> (Vec<Component>, Vec<usize>) {
    let mut label = vec![usize::MAX; h * w];
    let mut out = Vec::new();
    let mut stack = Vec::new();
    for start in 0..h * w {
        if !ink[start] || label[start] != usize::MAX {
            continue;
        }
        let id = out.len();
        let mut c = Component {
            pixels: Vec::new(),
            x0: usize::MAX,
            y0: usize::MAX,
            x1: 0,
            y1: 0,
        };
        label[start] = id;
        stack.push(start);
        while let Some(i) = stack.pop() {
            let (y, x) = (i / w, i % w);
            c.pixels.push((y, x));
            c.x0 = c.x0.min(x);
            c.y0 = c.y0.min(y);
            c.x1 = c.x1.max(x);
            c.y1 = c.y1.max(y);
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                    if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                        continue;
                    }
                    let j = ny as usize * w + nx as usize;
                    if ink[j] && label[j] == usize::MAX {
                        label[j] = id;
                        stack.push(j);
                    }
                }
            }
        }
        out.push(c);
    }
    (out, label)
}

fn ncc(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut num, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (da, db) = (x - ma, y - mb);
        num += da * db;
        va += da * da;
        vb += db * db;
    }
    if va <= 0.0 || vb <= 0.0 {
        return 0.0;
    }
    num / (va * vb).sqrt()
}

/// Best-matching character for a soft ink patch of size `h x w` whose
/// glyph cell spans `cw x ch` starting at (1, 1).
fn classify(patch: &[f64], h: usize, w: usize, cw: f64, ch: f64, atlas: &[GlyphTemplate]) -> Option<char> {
    let area: f64 = patch.iter().sum();
    let aspect = cw / ch;
    let mut best: Option<(f64, char)> = None;
    for t in atlas {
        // Stroke width from ink area over centreline length, refined once
        // for the inset of the centreline.
        let mut thick = area / t.stroke_length(cw, ch).max(1e-9);
        thick = area / t.stroke_length((cw - thick).max(0.0), (ch - thick).max(0.0)).max(1e-9);
        let penalty = ASPECT_WEIGHT * (aspect / t.aspect).ln().abs();
        for k in THICKNESS_SWEEP {
            for deg in ROTATION_SWEEP {
                let p = GlyphPlacement {
                    x: 1.0,
                    y: 1.0,
                    width: cw,
                    height: ch,
                    thickness: (thick * k).clamp(1.0, 0.5 * cw.min(ch)),
                    rotation: deg.to_radians(),
                };
                let score = ncc(patch, &render_template(t, &p, h, w)) - penalty;
                if best.is_none_or(|(s, _)| score > s) {
                    best = Some((score, t.ch));
                }
            }
        }
    }
    best.map(|(_, c)| c)
}

/// Reads the glyph sequence in `region`. Blank or empty regions give "".
pub fn template_recognizer(region: &Image, atlas: &[GlyphTemplate]) -> String {
    let (_, h, w) = region.dims();
    if h == 0 || w == 0 || atlas.is_empty() {
        return String::new();
    }
    let luma = region.luma();
    let mut border = Vec::with_capacity(2 * (h + w));
    for y in 0..h {
        for x in 0..w {
            if y == 0 || x == 0 || y + 1 == h || x + 1 == w {
                border.push(luma[y * w + x]);
            }
        }
    }
    let bg = median(border);
    let diff: Vec<f64> = luma.iter().map(|l| (l - bg).abs()).collect();
    let contrast = diff.iter().cloned().fold(0.0, f64::max);
    if contrast < MIN_CONTRAST {
        return String::new();
    }
    let threshold = MIN_CONTRAST.max(0.5 * contrast);
    let ink: Vec<bool> = diff.iter().map(|&d| d >= threshold).collect();
    let (comps, label) = components(&ink, h, w);
    let largest = comps.iter().map(|c| c.pixels.len()).max().unwrap_or(0);
    let mut keep: Vec<(usize, &Component)> = comps
        .iter()
        .enumerate()
        .filter(|(_, c)| c.pixels.len() >= MIN_PIXELS && c.pixels.len() as f64 >= MIN_RELATIVE * largest as f64)
        .collect();
    if keep.is_empty() {
        return String::new();
    }

    let centers: Vec<(f64, f64)> = keep.iter().map(|(_, c)| c.center()).collect();
    let spread = |f: fn(&(f64, f64)) -> f64| {
        let m = centers.iter().map(f).sum::<f64>() / centers.len() as f64;
        centers.iter().map(|c| (f(c) - m).powi(2)).sum::<f64>()
    };
    let vertical = spread(|c| c.1) > spread(|c| c.0);
    keep.sort_by(|(_, a), (_, b)| {
        let (ka, kb) = if vertical { (a.center().1, b.center().1) } else { (a.center().0, b.center().0) };
        ka.total_cmp(&kb)
    });

    let mut out = String::new();
    for (id, c) in keep {
        // Soft ink over the box plus a one-pixel rim, excluding other
        // components.
        let (pw, ph) = (c.width() + 2, c.height() + 2);
        let mut patch = vec![0.0; pw * ph];
        for py in 0..ph {
            for px in 0..pw {
                let (y, x) = (c.y0 as i64 + py as i64 - 1, c.x0 as i64 + px as i64 - 1);
                if y < 0 || x < 0 || y >= h as i64 || x >= w as i64 {
                    continue;
                }
                let i = y as usize * w + x as usize;
                if label[i] != usize::MAX && label[i] != id {
                    continue;
                }
                patch[py * pw + px] = (diff[i] / contrast).min(1.0);
            }
        }
        if let Some(ch) = classify(&patch, ph, pw, c.width() as f64, c.height() as f64, atlas) {
            out.push(ch);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::glyphs::atlas;

    fn draw(text: &str, gh: f64, thick: f64, dark: bool) -> Image {
        let margin = 4.0;
        let gap = 0.3 * gh;
        let widths: Vec<f64> = text.chars().map(|c| crate::synth::glyphs::template(c).unwrap().aspect * gh).collect();
        let w = (widths.iter().sum::<f64>() + gap * (widths.len() as f64 - 1.0) + 2.0 * margin).ceil() as usize;
        let h = (gh + 2.0 * margin).ceil() as usize;
        let mut alpha = vec![0.0f64; h * w];
        let mut x = margin;
        for (c, cw) in text.chars().zip(&widths) {
            let p = GlyphPlacement {
                x,
                y: margin,
                width: *cw,
                height: gh,
                thickness: thick * gh,
                rotation: 0.0,
            };
            let a = render_template(crate::synth::glyphs::template(c).unwrap(), &p, h, w);
            for (o, v) in alpha.iter_mut().zip(a) {
                *o = o.max(v);
            }
            x += cw + gap;
        }
        let (bg, fg) = if dark { (0.55, 0.05) } else { (0.45, 0.95) };
        let data = alpha.iter().map(|a| a * fg + (1.0 - a) * bg).collect();
        Image::new(1, h, w, data).unwrap().quantized()
    }

    #[test]
    fn reads_every_glyph_at_several_sizes() {
        let all: String = atlas().iter().map(|t| t.ch).collect();
        for gh in [14.0, 18.0, 24.0] {
            for thick in [0.17, 0.24] {
                for chunk in all.as_bytes().chunks(4) {
                    let text = std::str::from_utf8(chunk).unwrap();
                    let img = draw(text, gh, thick, gh > 16.0);
                    assert_eq!(template_recognizer(&img, atlas()), text, "height {gh} thickness {thick}");
                }
            }
        }
    }

    #[test]
    fn blank_and_empty_regions_read_empty() {
        assert_eq!(template_recognizer(&Image::filled(3, 10, 10, 0.4), atlas()), "");
        assert_eq!(template_recognizer(&Image::filled(3, 0, 0, 0.4), atlas()), "");
    }
}
