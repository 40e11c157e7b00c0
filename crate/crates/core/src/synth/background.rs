//! Procedural backgrounds: gradients, smooth value noise and flat shapes, all
//! kept in a mid-tone band so that dark or light text stands out. A
//! directory of user images can be used instead.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{param_err, Error, Result};
use crate::image::{resize, Filter, Image};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackgroundKind {
    Gradient,
    Noise,
    Shapes,
}

impl BackgroundKind {
    pub const ALL: [BackgroundKind; 3] = [Self::Gradient, Self::Noise, Self::Shapes];
}

/// Luma band of procedural backgrounds.
pub const BG_LUMA: (f64, f64) = (0.35, 0.65);

fn luma(c: [f64; 3]) -> f64 {
    0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]
}

/// A random colour whose luma lies in `BG_LUMA`.
fn mid_color<R: Rng + ?Sized>(rng: &mut R) -> [f64; 3] {
    let target = rng.random_range(BG_LUMA.0 + 0.03..BG_LUMA.1 - 0.03);
    let mut c = [0.0; 3];
    for v in &mut c {
        *v = rng.random_range(0.0..1.0);
    }
    let l = luma(c);
    for v in &mut c {
        *v = (*v + target - l).clamp(0.0, 1.0);
    }
    let shift = target - luma(c);
    c.map(|v| (v + shift).clamp(0.0, 1.0))
}

fn jitter<R: Rng + ?Sized>(base: [f64; 3], amount: f64, rng: &mut R) -> [f64; 3] {
    let d = rng.random_range(-amount..amount);
    base.map(|v| (v + d).clamp(0.0, 1.0))
}

fn lerp3(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [0, 1, 2].map(|i| a[i] + (b[i] - a[i]) * t)
}

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Smooth lattice noise in `[-1, 1]` with `cells` lattice cells per side.
fn value_noise<R: Rng + ?Sized>(h: usize, w: usize, cells: usize, rng: &mut R) -> Vec<f64> {
    let n = cells + 1;
    let lattice: Vec<f64> = (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        let fy = y as f64 / h as f64 * cells as f64;
        let (iy, ty) = (fy.floor() as usize, smoothstep(fy.fract()));
        for x in 0..w {
            let fx = x as f64 / w as f64 * cells as f64;
            let (ix, tx) = (fx.floor() as usize, smoothstep(fx.fract()));
            let at = |yy: usize, xx: usize| lattice[yy.min(cells) * n + xx.min(cells)];
            let top = at(iy, ix) * (1.0 - tx) + at(iy, ix + 1) * tx;
            let bot = at(iy + 1, ix) * (1.0 - tx) + at(iy + 1, ix + 1) * tx;
            out[y * w + x] = top * (1.0 - ty) + bot * ty;
        }
    }
    out
}

fn paint(img: &mut Image, y: usize, x: usize, c: [f64; 3]) {
    for (ch, v) in c.iter().enumerate() {
        img.set(ch, y, x, *v);
    }
}

/// Procedural background of the given kind.
pub fn procedural<R: Rng + ?Sized>(kind: BackgroundKind, h: usize, w: usize, rng: &mut R) -> Image {
    let mut img = Image::filled(3, h, w, 0.0);
    let base = mid_color(rng);
    match kind {
        BackgroundKind::Gradient => {
            let other = jitter(base, 0.12, rng);
            let angle = rng.random_range(0.0..std::f64::consts::TAU);
            let (dx, dy) = (angle.cos(), angle.sin());
            let span = (h as f64).hypot(w as f64);
            for y in 0..h {
                for x in 0..w {
                    let t = ((x as f64 - 0.5 * w as f64) * dx + (y as f64 - 0.5 * h as f64) * dy) / span + 0.5;
                    paint(&mut img, y, x, lerp3(base, other, t.clamp(0.0, 1.0)));
                }
            }
        }
        BackgroundKind::Noise => {
            let coarse = value_noise(h, w, 3, rng);
            let fine = value_noise(h, w, 8, rng);
            let tint = jitter(base, 0.08, rng);
            for y in 0..h {
                for x in 0..w {
                    let i = y * w + x;
                    let n = 0.06 * coarse[i] + 0.025 * fine[i];
                    let c = lerp3(base, tint, 0.5 + 0.5 * coarse[i]).map(|v| (v + n).clamp(0.0, 1.0));
                    paint(&mut img, y, x, c);
                }
            }
        }
        BackgroundKind::Shapes => {
            for y in 0..h {
                for x in 0..w {
                    paint(&mut img, y, x, base);
                }
            }
            let count = rng.random_range(2..6);
            for _ in 0..count {
                let c = jitter(base, 0.1, rng);
                let cx = rng.random_range(0.0..w as f64);
                let cy = rng.random_range(0.0..h as f64);
                let r = rng.random_range(0.1..0.35) * h.min(w) as f64;
                let circle = rng.random_bool(0.5);
                for y in 0..h {
                    for x in 0..w {
                        let (px, py) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                        let inside = if circle {
                            px.hypot(py) <= r
                        } else {
                            px.abs() <= r && py.abs() <= 0.6 * r
                        };
                        if inside {
                            paint(&mut img, y, x, c);
                        }
                    }
                }
            }
        }
    }
    img
}

/// Where backgrounds come from.
#[derive(Debug, Clone)]
pub enum BackgroundSource {
    Procedural,
    /// Decoded user images; each sample takes a seeded crop.
    Images(Vec<Image>),
}

impl BackgroundSource {
    /// Loads every `.png` in `dir`, sorted by file name.
    pub fn from_dir(dir: &Path) -> Result<Self> {
        let mut paths: Vec<_> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| e.eq_ignore_ascii_case("png"))
            })
            .collect();
        paths.sort();
        if paths.is_empty() {
            return Err(param_err!("no background images in {}", dir.display()));
        }
        let images = paths
            .iter()
            .map(|p| Image::load_png(p, 3))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::Images(images))
    }

    pub fn sample<R: Rng + ?Sized>(&self, h: usize, w: usize, rng: &mut R) -> (Image, String) {
        match self {
            Self::Procedural => {
                let kind = BackgroundKind::ALL[rng.random_range(0..BackgroundKind::ALL.len())];
                let name = serde_json::to_value(kind)
                    .ok()
                    .and_then(|v| v.as_str().map(str::to_owned))
                    .unwrap_or_default();
                (procedural(kind, h, w, rng), name)
            }
            Self::Images(list) => {
                let i = rng.random_range(0..list.len());
                let src = &list[i];
                // Largest crop with the target aspect ratio, then resample.
                let scale = (src.height() as f64 / h as f64).min(src.width() as f64 / w as f64);
                let ch = ((h as f64 * scale).floor() as usize).clamp(1, src.height());
                let cw = ((w as f64 * scale).floor() as usize).clamp(1, src.width());
                let y = rng.random_range(0..=src.height() - ch);
                let x = rng.random_range(0..=src.width() - cw);
                let crop = src.crop(x, y, cw, ch).expect("crop inside source");
                (resize(&crop, h, w, Filter::Bicubic).clamp01(), format!("image{i}"))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn procedural_backgrounds_stay_mid_tone() {
        let rng = &mut ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            for kind in BackgroundKind::ALL {
                let img = procedural(kind, 32, 32, rng);
                assert!(img.is_valid());
                let l = img.luma();
                let (lo, hi) = l.iter().fold((1.0f64, 0.0f64), |(a, b), &v| (a.min(v), b.max(v)));
                assert!(lo > 0.2 && hi < 0.8, "{kind:?}: {lo} {hi}");
            }
        }
    }

    #[test]
    fn directory_source_crops_to_size() {
        let dir = tempfile::tempdir().unwrap();
        let img = procedural(BackgroundKind::Noise, 40, 50, &mut ChaCha8Rng::seed_from_u64(1));
        img.save_png(&dir.path().join("a.png")).unwrap();
        let src = BackgroundSource::from_dir(dir.path()).unwrap();
        let (bg, _) = src.sample(16, 16, &mut ChaCha8Rng::seed_from_u64(2));
        assert_eq!(bg.dims(), (3, 16, 16));
        assert!(bg.is_valid());
        let empty = tempfile::tempdir().unwrap();
        assert!(BackgroundSource::from_dir(empty.path()).is_err());
    }
}
