//! Single-stage degradation chain: blur, downsample, noise, block-DCT
//! compression. Every random choice comes from the caller's seed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{param_err, shape_err, Result};
use crate::image::{gaussian_blur, resize, Filter, Image};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DegradeConfig {
    /// Gaussian blur sigma range in high-resolution pixels.
    pub blur_sigma: (f64, f64),
    /// Resampling kernels drawn from uniformly.
    pub kernels: Vec<Filter>,
    /// Additive Gaussian noise sigma range in unit intensity.
    pub noise_sigma: (f64, f64),
    /// Compression quality range, 1..=100; 100 disables compression.
    pub jpeg_quality: (u32, u32),
    pub scale: usize,
}

impl Default for DegradeConfig {
    fn default() -> Self {
        Self {
            blur_sigma: (0.2, 1.0),
            kernels: Filter::ALL.to_vec(),
            noise_sigma: (0.0, 0.02),
            jpeg_quality: (60, 95),
            scale: 4,
        }
    }
}

impl DegradeConfig {
    /// Every stage switched off except a bicubic downsample.
    pub fn bicubic_only(scale: usize) -> Self {
        Self {
            blur_sigma: (0.0, 0.0),
            kernels: vec![Filter::Bicubic],
            noise_sigma: (0.0, 0.0),
            jpeg_quality: (100, 100),
            scale,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let range_ok = |(lo, hi): (f64, f64)| lo.is_finite() && hi.is_finite() && 0.0 <= lo && lo <= hi;
        if !range_ok(self.blur_sigma) || !range_ok(self.noise_sigma) {
            return Err(param_err!(
                "invalid blur {:?} or noise {:?} range",
                self.blur_sigma,
                self.noise_sigma
            ));
        }
        let (qlo, qhi) = self.jpeg_quality;
        if qlo == 0 || qlo > qhi || qhi > 100 {
            return Err(param_err!("invalid quality range {:?}", self.jpeg_quality));
        }
        if self.kernels.is_empty() {
            return Err(param_err!("no resampling kernels"));
        }
        if self.scale == 0 {
            return Err(param_err!("scale must be positive"));
        }
        Ok(())
    }
}

/// The concrete choices made for one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegradeParams {
    pub blur_sigma: f64,
    pub kernel: Filter,
    pub noise_sigma: f64,
    pub jpeg_quality: u32,
}

fn draw(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Degrades `x_h` into a low-resolution image. Deterministic in `seed`.
pub fn degrade(x_h: &Image, cfg: &DegradeConfig, seed: u64) -> Result<(Image, DegradeParams)> {
    cfg.validate()?;
    let (_, h, w) = x_h.dims();
    if h == 0 || w == 0 || h % cfg.scale != 0 || w % cfg.scale != 0 {
        return Err(shape_err!("{h}x{w} image not divisible by scale {}", cfg.scale));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (qlo, qhi) = cfg.jpeg_quality;
    let params = DegradeParams {
        blur_sigma: draw(&mut rng, cfg.blur_sigma),
        kernel: cfg.kernels[rng.random_range(0..cfg.kernels.len())],
        noise_sigma: draw(&mut rng, cfg.noise_sigma),
        jpeg_quality: rng.random_range(qlo..=qhi),
    };
    let out = apply(x_h, &params, cfg.scale, &mut rng);
    Ok((out, params))
}

/// Runs the chain with fixed parameters; `rng` supplies the noise.
pub fn apply<R: Rng + ?Sized>(x_h: &Image, p: &DegradeParams, scale: usize, rng: &mut R) -> Image {
    let blurred = if p.blur_sigma > 0.0 {
        gaussian_blur(x_h, p.blur_sigma)
    } else {
        x_h.clone()
    };
    let mut low = resize(&blurred, x_h.height() / scale, x_h.width() / scale, p.kernel).clamp01();
    if p.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, p.noise_sigma).expect("finite sigma");
        for v in low.data_mut() {
            *v = (*v + normal.sample(rng)).clamp(0.0, 1.0);
        }
    }
    if p.jpeg_quality < 100 {
        low = jpeg_like(&low, p.jpeg_quality);
    }
    low
}

const LUMA_TABLE: [f64; 64] = [
    16., 11., 10., 16., 24., 40., 51., 61., 12., 12., 14., 19., 26., 58., 60., 55., 14., 13., 16., 24., 40., 57., 69.,
    56., 14., 17., 22., 29., 51., 87., 80., 62., 18., 22., 37., 56., 68., 109., 103., 77., 24., 35., 55., 64., 81.,
    104., 113., 92., 49., 64., 78., 87., 103., 121., 120., 101., 72., 92., 95., 98., 112., 100., 103., 99.,
];

const CHROMA_TABLE: [f64; 64] = [
    17., 18., 24., 47., 99., 99., 99., 99., 18., 21., 26., 66., 99., 99., 99., 99., 24., 26., 56., 99., 99., 99., 99.,
    99., 47., 66., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99.,
    99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99.,
];

/// Quantisation table scaled for `quality` with the usual IJG rule.
fn scaled_table(base: &[f64; 64], quality: u32) -> [f64; 64] {
    let q = quality.clamp(1, 100) as f64;
    let s = if q < 50.0 { 5000.0 / q } else { 200.0 - 2.0 * q };
    base.map(|b| ((b * s + 50.0) / 100.0).floor().clamp(1.0, 255.0))
}

fn dct_basis() -> [[f64; 8]; 8] {
    let mut c = [[0.0; 8]; 8];
    for (k, row) in c.iter_mut().enumerate() {
        let a = if k == 0 { (1.0f64 / 8.0).sqrt() } else { (2.0f64 / 8.0).sqrt() };
        for (n, v) in row.iter_mut().enumerate() {
            *v = a * ((2 * n + 1) as f64 * k as f64 * std::f64::consts::PI / 16.0).cos();
        }
    }
    c
}

/// Quantises one 8x8 block in the DCT domain and transforms it back.
fn quantize_block(block: &mut [f64; 64], table: &[f64; 64], basis: &[[f64; 8]; 8]) {
    let mut tmp = [0.0; 64];
    let mut coef = [0.0; 64];
    for u in 0..8 {
        for x in 0..8 {
            tmp[u * 8 + x] = (0..8).map(|y| basis[u][y] * block[y * 8 + x]).sum();
        }
    }
    for u in 0..8 {
        for v in 0..8 {
            let c: f64 = (0..8).map(|x| basis[v][x] * tmp[u * 8 + x]).sum();
            let q = table[u * 8 + v];
            coef[u * 8 + v] = (c / q).round() * q;
        }
    }
    for y in 0..8 {
        for v in 0..8 {
            tmp[y * 8 + v] = (0..8).map(|u| basis[u][y] * coef[u * 8 + v]).sum();
        }
    }
    for y in 0..8 {
        for x in 0..8 {
            block[y * 8 + x] = (0..8).map(|v| basis[v][x] * tmp[y * 8 + v]).sum();
        }
    }
}

/// JPEG-style lossy round trip: YCbCr, 8x8 DCT, table quantisation, back to
/// RGB. Edges are replicated to fill partial blocks. Grayscale images use
/// only the luma table.
pub fn jpeg_like(img: &Image, quality: u32) -> Image {
    let (c, h, w) = img.dims();
    let basis = dct_basis();
    let luma_t = scaled_table(&LUMA_TABLE, quality);
    let chroma_t = scaled_table(&CHROMA_TABLE, quality);
    let n = h * w;
    let mut planes: Vec<Vec<f64>> = if c == 3 {
        let (r, g, b) = (img.plane(0), img.plane(1), img.plane(2));
        let mut y = vec![0.0; n];
        let mut cb = vec![0.0; n];
        let mut cr = vec![0.0; n];
        for i in 0..n {
            let (r, g, b) = (255.0 * r[i], 255.0 * g[i], 255.0 * b[i]);
            y[i] = 0.299 * r + 0.587 * g + 0.114 * b;
            cb[i] = 128.0 - 0.168736 * r - 0.331264 * g + 0.5 * b;
            cr[i] = 128.0 + 0.5 * r - 0.418688 * g - 0.081312 * b;
        }
        vec![y, cb, cr]
    } else {
        (0..c).map(|ch| img.plane(ch).iter().map(|v| 255.0 * v).collect()).collect()
    };
    for (pi, plane) in planes.iter_mut().enumerate() {
        let table = if pi == 0 || c != 3 { &luma_t } else { &chroma_t };
        for by in (0..h).step_by(8) {
            for bx in (0..w).step_by(8) {
                let mut block = [0.0; 64];
                for y in 0..8 {
                    for x in 0..8 {
                        let (sy, sx) = ((by + y).min(h - 1), (bx + x).min(w - 1));
                        block[y * 8 + x] = plane[sy * w + sx] - 128.0;
                    }
                }
                quantize_block(&mut block, table, &basis);
                for y in 0..8.min(h - by) {
                    for x in 0..8.min(w - bx) {
                        plane[(by + y) * w + bx + x] = block[y * 8 + x] + 128.0;
                    }
                }
            }
        }
    }
    let mut out = Image::filled(c, h, w, 0.0);
    if c == 3 {
        for i in 0..n {
            let (y, cb, cr) = (planes[0][i], planes[1][i] - 128.0, planes[2][i] - 128.0);
            let rgb = [y + 1.402 * cr, y - 0.344136 * cb - 0.714136 * cr, y + 1.772 * cb];
            for (ch, v) in rgb.iter().enumerate() {
                out.plane_mut(ch)[i] = (v / 255.0).clamp(0.0, 1.0);
            }
        }
    } else {
        for (ch, plane) in planes.iter().enumerate() {
            for (o, v) in out.plane_mut(ch).iter_mut().zip(plane) {
                *o = (v / 255.0).clamp(0.0, 1.0);
            }
        }
    }
    out
}
