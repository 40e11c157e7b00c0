//! Unit-range planar images, PNG I/O and separable resampling.

use std::path::Path;

use image::{GrayImage, RgbImage};

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// Planar (channel-first) image with values in `[0, 1]`. RGB images have
/// three channels; segmentation masks have one.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

pub type SegMask = Image;

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(shape_err!(
                "image {channels}x{height}x{width} needs {} values, got {}",
                channels * height * width,
                data.len()
            ));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, v: f64) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![v; channels * height * width],
        }
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (c, h, w) = t.chw()?;
        Self::new(c, h, w, t.data().to_vec())
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[self.channels, self.height, self.width], self.data.clone()).unwrap()
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.height * self.width;
        &mut self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn clamp01(mut self) -> Self {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
        self
    }

    pub fn is_valid(&self) -> bool {
        self.data.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v))
    }

    /// ITU-R 601 luma for RGB input; single-channel images pass through.
    pub fn luma(&self) -> Vec<f64> {
        if self.channels == 1 {
            return self.data.clone();
        }
        let (r, g, b) = (self.plane(0), self.plane(1), self.plane(2));
        r.iter()
            .zip(g)
            .zip(b)
            .map(|((r, g), b)| 0.299 * r + 0.587 * g + 0.114 * b)
            .collect()
    }

    pub fn crop(&self, x: usize, y: usize, w: usize, h: usize) -> Result<Self> {
        if x + w > self.width || y + h > self.height {
            return Err(shape_err!(
                "crop ({x},{y},{w},{h}) exceeds {}x{}",
                self.width,
                self.height
            ));
        }
        let mut out = Self::filled(self.channels, h, w, 0.0);
        for c in 0..self.channels {
            for yy in 0..h {
                for xx in 0..w {
                    out.set(c, yy, xx, self.get(c, y + yy, x + xx));
                }
            }
        }
        Ok(out)
    }

    /// Quantizes to 8 bits and back, as a PNG round trip would.
    pub fn quantized(&self) -> Self {
        let mut out = self.clone();
        for v in &mut out.data {
            *v = to_u8(*v) as f64 / 255.0;
        }
        out
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let codec = |e: image::ImageError| Error::Codec {
            path: path.to_path_buf(),
            message: e.to_string(),
        };
        let (w, h) = (self.width as u32, self.height as u32);
        match self.channels {
            1 => {
                let buf: Vec<u8> = self.data.iter().map(|&v| to_u8(v)).collect();
                GrayImage::from_raw(w, h, buf)
                    .expect("buffer size")
                    .save(path)
                    .map_err(codec)
            }
            3 => {
                let n = self.height * self.width;
                let mut buf = Vec::with_capacity(3 * n);
                for i in 0..n {
                    for c in 0..3 {
                        buf.push(to_u8(self.data[c * n + i]));
                    }
                }
                RgbImage::from_raw(w, h, buf)
                    .expect("buffer size")
                    .save(path)
                    .map_err(codec)
            }
            c => Err(shape_err!("cannot write a {c}-channel image as PNG")),
        }
    }

    /// Loads a PNG as RGB (`channels = 3`) or grayscale (`channels = 1`).
    pub fn load_png(path: &Path, channels: usize) -> Result<Self> {
        let img = image::open(path).map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::Codec {
                path: path.to_path_buf(),
                message: other.to_string(),
            },
        })?;
        match channels {
            1 => {
                let g = img.to_luma8();
                let (w, h) = (g.width() as usize, g.height() as usize);
                let data = g.as_raw().iter().map(|&v| v as f64 / 255.0).collect();
                Self::new(1, h, w, data)
            }
            3 => {
                let rgb = img.to_rgb8();
                let (w, h) = (rgb.width() as usize, rgb.height() as usize);
                let raw = rgb.as_raw();
                let n = w * h;
                let mut data = vec![0.0; 3 * n];
                for i in 0..n {
                    for c in 0..3 {
                        data[c * n + i] = raw[3 * i + c] as f64 / 255.0;
                    }
                }
                Self::new(3, h, w, data)
            }
            c => Err(shape_err!("cannot load a PNG as {c} channels")),
        }
    }
}

pub fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Resampling kernels used for resizing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Filter {
    Nearest,
    Bilinear,
    Bicubic,
}

impl Filter {
    pub const ALL: [Filter; 3] = [Filter::Bicubic, Filter::Bilinear, Filter::Nearest];

    fn support(self) -> f64 {
        match self {
            Filter::Nearest => 0.5,
            Filter::Bilinear => 1.0,
            Filter::Bicubic => 2.0,
        }
    }

    fn eval(self, x: f64) -> f64 {
        let x = x.abs();
        match self {
            Filter::Nearest => {
                if x < 0.5 {
                    1.0
                } else {
                    0.0
                }
            }
            Filter::Bilinear => (1.0 - x).max(0.0),
            Filter::Bicubic => {
                // Keys cubic, a = -0.5.
                let a = -0.5;
                if x < 1.0 {
                    ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0
                } else if x < 2.0 {
                    (((x - 5.0) * x + 8.0) * x - 4.0) * a
                } else {
                    0.0
                }
            }
        }
    }
}

/// Normalised taps for resampling `src` samples onto `dst`, widening the
/// kernel when downsampling (antialiased). Nearest uses point sampling.
fn resample_taps(src: usize, dst: usize, filter: Filter) -> Vec<Vec<(usize, f64)>> {
    let scale = src as f64 / dst as f64;
    if filter == Filter::Nearest {
        return (0..dst)
            .map(|o| {
                let c = ((o as f64 + 0.5) * scale).floor() as usize;
                vec![(c.min(src - 1), 1.0)]
            })
            .collect();
    }
    let fscale = scale.max(1.0);
    let support = filter.support() * fscale;
    (0..dst)
        .map(|o| {
            let center = (o as f64 + 0.5) * scale;
            let lo = (center - support).floor() as isize;
            let hi = (center + support).ceil() as isize;
            let mut taps: Vec<(usize, f64)> = Vec::new();
            for i in lo..=hi {
                let w = filter.eval((i as f64 + 0.5 - center) / fscale);
                if w == 0.0 {
                    continue;
                }
                let idx = i.clamp(0, src as isize - 1) as usize;
                match taps.iter_mut().find(|(j, _)| *j == idx) {
                    Some(t) => t.1 += w,
                    None => taps.push((idx, w)),
                }
            }
            let total: f64 = taps.iter().map(|t| t.1).sum();
            for t in &mut taps {
                t.1 /= total;
            }
            taps
        })
        .collect()
}

/// Separable resize with edge clamping.
pub fn resize(img: &Image, height: usize, width: usize, filter: Filter) -> Image {
    let (c, h, w) = img.dims();
    let tx = resample_taps(w, width, filter);
    let ty = resample_taps(h, height, filter);
    let mut tmp = vec![0.0; c * h * width];
    for ch in 0..c {
        let plane = img.plane(ch);
        for y in 0..h {
            let row = &plane[y * w..(y + 1) * w];
            for (x, taps) in tx.iter().enumerate() {
                tmp[(ch * h + y) * width + x] = taps.iter().map(|&(i, wt)| row[i] * wt).sum();
            }
        }
    }
    let mut out = Image::filled(c, height, width, 0.0);
    for ch in 0..c {
        for (y, taps) in ty.iter().enumerate() {
            for x in 0..width {
                let v = taps
                    .iter()
                    .map(|&(i, wt)| tmp[(ch * h + i) * width + x] * wt)
                    .sum();
                out.set(ch, y, x, v);
            }
        }
    }
    out
}

/// Bicubic upsampling by an integer factor, clamped to `[0, 1]`.
pub fn upscale_bicubic(img: &Image, factor: usize) -> Image {
    resize(img, img.height() * factor, img.width() * factor, Filter::Bicubic).clamp01()
}

/// Separable Gaussian blur with replicate borders; `sigma <= 0` is a no-op.
pub fn gaussian_blur(img: &Image, sigma: f64) -> Image {
    if sigma <= 0.0 {
        return img.clone();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let (c, h, w) = img.dims();
    let mut tmp = img.clone();
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, kv) in kernel.iter().enumerate() {
                    let sx = (x as isize + k as isize - radius).clamp(0, w as isize - 1) as usize;
                    acc += kv * img.get(ch, y, sx);
                }
                tmp.set(ch, y, x, acc);
            }
        }
    }
    let mut out = tmp.clone();
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, kv) in kernel.iter().enumerate() {
                    let sy = (y as isize + k as isize - radius).clamp(0, h as isize - 1) as usize;
                    acc += kv * tmp.get(ch, sy, x);
                }
                out.set(ch, y, x, acc);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> Image {
        let data = (0..3 * h * w).map(|i| (i % 17) as f64 / 16.0).collect();
        Image::new(3, h, w, data).unwrap()
    }

    #[test]
    fn resize_preserves_constants_for_every_filter() {
        let img = Image::filled(3, 16, 16, 0.37);
        for f in Filter::ALL {
            for (h, w) in [(4, 4), (64, 64), (7, 9)] {
                let r = resize(&img, h, w, f);
                assert!(r.data().iter().all(|v| (v - 0.37).abs() < 1e-12), "{f:?}");
            }
        }
    }

    #[test]
    fn same_size_resize_is_identity() {
        let img = ramp(8, 8);
        for f in Filter::ALL {
            let r = resize(&img, 8, 8, f);
            assert!(r.data().iter().zip(img.data()).all(|(a, b)| (a - b).abs() < 1e-12));
        }
    }

    #[test]
    fn png_round_trip_matches_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let img = ramp(5, 7);
        let p = dir.path().join("x.png");
        img.save_png(&p).unwrap();
        assert_eq!(Image::load_png(&p, 3).unwrap(), img.quantized());
        let mask = Image::new(1, 2, 2, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let p = dir.path().join("m.png");
        mask.save_png(&p).unwrap();
        assert_eq!(Image::load_png(&p, 1).unwrap(), mask);
    }

    #[test]
    fn blur_preserves_mean_of_constant_and_smooths_impulse() {
        let mut img = Image::filled(1, 9, 9, 0.0);
        img.set(0, 4, 4, 1.0);
        let b = gaussian_blur(&img, 1.0);
        assert!(b.get(0, 4, 4) < 1.0 && b.get(0, 4, 5) > 0.0);
        assert!((b.data().iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn crop_bounds() {
        let img = ramp(4, 4);
        assert!(img.crop(2, 2, 3, 1).is_err());
        assert_eq!(img.crop(1, 1, 2, 2).unwrap().dims(), (3, 2, 2));
    }
}
