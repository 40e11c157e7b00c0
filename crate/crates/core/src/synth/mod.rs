//! Synthetic text super-resolution data: glyph patches with exact masks,
//! composited onto backgrounds, degraded to low resolution and written out
//! as (low-res, high-res, mask) triplets.

pub mod background;
pub mod degrade;
pub mod glyphs;

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{param_err, Error, Result};
use crate::image::{Image, SegMask};
pub use background::{BackgroundKind, BackgroundSource};
pub use degrade::{degrade, DegradeConfig, DegradeParams};
use glyphs::{rasterize, segments, template, GlyphPlacement};

/// Axis-aligned pixel rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoxRect {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl BoxRect {
    pub fn area(&self) -> usize {
        self.w * self.h
    }

    pub fn intersection_area(&self, o: &BoxRect) -> usize {
        let x0 = self.x.max(o.x);
        let y0 = self.y.max(o.y);
        let x1 = (self.x + self.w).min(o.x + o.w);
        let y1 = (self.y + self.h).min(o.y + o.h);
        x1.saturating_sub(x0) * y1.saturating_sub(y0)
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x && x < self.x + self.w && y >= self.y && y < self.y + self.h
    }
}

/// Drawing parameters for one patch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchStyle {
    /// Glyph cell height in pixels.
    pub glyph_height: f64,
    /// Stroke width as a fraction of the glyph height.
    pub thickness: f64,
    /// Gap between glyph cells as a fraction of the glyph height.
    pub spacing: f64,
    pub max_rotation_deg: f64,
    pub vertical: bool,
    pub color: [f64; 3],
    /// Inclusive range of glyph counts.
    pub glyphs: (usize, usize),
}

impl Default for PatchStyle {
    fn default() -> Self {
        Self {
            glyph_height: 20.0,
            thickness: 0.2,
            spacing: 0.3,
            max_rotation_deg: 5.0,
            vertical: false,
            color: [0.05, 0.05, 0.05],
            glyphs: (1, 8),
        }
    }
}

/// A rendered run of glyphs with colour, coverage and exact mask.
#[derive(Debug, Clone, PartialEq)]
pub struct GlyphPatch {
    /// Four planes: text colour then coverage alpha.
    pub rgba: Image,
    /// `alpha > 0.5`.
    pub mask: SegMask,
    pub transcript: String,
    pub vertical: bool,
    /// Position in the target image, set once placed.
    pub bbox: Option<BoxRect>,
}

impl GlyphPatch {
    pub fn width(&self) -> usize {
        self.rgba.width()
    }

    pub fn height(&self) -> usize {
        self.rgba.height()
    }

    pub fn alpha(&self) -> &[f64] {
        self.rgba.plane(3)
    }
}

/// Renders a seeded run of glyphs drawn from `charset`.
pub fn render_glyph_patch(seed: u64, charset: &str, style: &PatchStyle) -> Result<GlyphPatch> {
    let chars: Vec<char> = charset.chars().collect();
    if chars.is_empty() {
        return Err(param_err!("empty charset"));
    }
    if let Some(c) = chars.iter().find(|&&c| template(c).is_none()) {
        return Err(param_err!("no glyph template for {c:?}"));
    }
    let valid = |v: f64| v.is_finite() && v > 0.0;
    if !valid(style.glyph_height) || !valid(style.thickness) || style.spacing < 0.0 {
        return Err(param_err!(
            "glyph height {} and thickness {} must be positive",
            style.glyph_height,
            style.thickness
        ));
    }
    let (lo, hi) = style.glyphs;
    if lo == 0 || lo > hi {
        return Err(param_err!("glyph count range {:?} is empty", style.glyphs));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = rng.random_range(lo..=hi);
    let text: String = (0..count).map(|_| chars[rng.random_range(0..chars.len())]).collect();

    let gh = style.glyph_height;
    let thick = (style.thickness * gh).max(1.0);
    let gap = style.spacing * gh;
    let margin = (0.15 * gh).ceil() + 2.0;
    let cells: Vec<f64> = text.chars().map(|c| template(c).unwrap().aspect * gh).collect();
    let (pw, ph) = if style.vertical {
        let w = cells.iter().cloned().fold(0.0, f64::max);
        (w, count as f64 * gh + (count - 1) as f64 * gap)
    } else {
        (cells.iter().sum::<f64>() + (count - 1) as f64 * gap, gh)
    };
    let width = (pw + 2.0 * margin).ceil() as usize;
    let height = (ph + 2.0 * margin).ceil() as usize;
    let mut alpha = vec![0.0; width * height];
    let max_rot = style.max_rotation_deg.abs().min(5.0).to_radians();
    let mut cursor = margin;
    for (c, &cw) in text.chars().zip(&cells) {
        let rotation = if max_rot > 0.0 { rng.random_range(-max_rot..=max_rot) } else { 0.0 };
        let (x, y) = if style.vertical {
            (margin + 0.5 * (pw - cw), cursor)
        } else {
            (cursor, margin)
        };
        let p = GlyphPlacement {
            x,
            y,
            width: cw,
            height: gh,
            thickness: thick,
            rotation,
        };
        rasterize(&mut alpha, height, width, &segments(template(c).unwrap(), &p), thick);
        cursor += if style.vertical { gh } else { cw } + gap;
    }

    let mut data = Vec::with_capacity(4 * width * height);
    for c in style.color {
        data.extend(std::iter::repeat_n(c.clamp(0.0, 1.0), width * height));
    }
    let mask: Vec<f64> = alpha.iter().map(|&a| if a > 0.5 { 1.0 } else { 0.0 }).collect();
    data.extend_from_slice(&alpha);
    Ok(GlyphPatch {
        rgba: Image::new(4, height, width, data)?,
        mask: Image::new(1, height, width, mask)?,
        transcript: text,
        vertical: style.vertical,
        bbox: None,
    })
}

/// Keeps patches whose long edge gives at least `min_ratio` pixels per
/// character.
pub fn filter_patch(p: &GlyphPatch, min_ratio: f64) -> Result<bool> {
    let n = p.transcript.chars().count();
    if n == 0 {
        return Err(param_err!("patch has an empty transcript"));
    }
    Ok(p.width().max(p.height()) as f64 / n as f64 >= min_ratio)
}

/// Where a patch landed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    pub transcript: String,
    pub bbox: BoxRect,
    pub vertical: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Composite {
    pub image: Image,
    pub mask: SegMask,
    /// Per-pixel maximum patch alpha.
    pub coverage: Image,
    pub placements: Vec<Placement>,
}

/// Attempts per patch before it is dropped under `no_overlap`.
pub const PLACEMENT_ATTEMPTS: usize = 100;

/// Alpha-blends patches onto `background` at seeded positions. The mask is
/// the union of patch masks over a zero image.
pub fn compose_sample(background: &Image, patches: &[GlyphPatch], seed: u64, no_overlap: bool) -> Result<Composite> {
    let (c, h, w) = background.dims();
    if c != 3 {
        return Err(param_err!("background must be RGB, got {c} channels"));
    }
    if let Some(small) = patches.iter().min_by_key(|p| p.width() * p.height()) {
        if small.width() > w || small.height() > h {
            return Err(param_err!(
                "{}x{} background cannot hold a {}x{} patch",
                w,
                h,
                small.width(),
                small.height()
            ));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut image = background.clone();
    let mut mask = Image::filled(1, h, w, 0.0);
    let mut coverage = Image::filled(1, h, w, 0.0);
    let mut placements: Vec<Placement> = Vec::new();
    for p in patches {
        if p.width() > w || p.height() > h {
            continue;
        }
        let attempts = if no_overlap { PLACEMENT_ATTEMPTS } else { 1 };
        let mut chosen = None;
        for _ in 0..attempts {
            let b = BoxRect {
                x: rng.random_range(0..=w - p.width()),
                y: rng.random_range(0..=h - p.height()),
                w: p.width(),
                h: p.height(),
            };
            if !no_overlap || placements.iter().all(|q| q.bbox.intersection_area(&b) == 0) {
                chosen = Some(b);
                break;
            }
        }
        let Some(b) = chosen else { continue };
        let alpha = p.alpha();
        for y in 0..b.h {
            for x in 0..b.w {
                let a = alpha[y * b.w + x];
                if a <= 0.0 {
                    continue;
                }
                let (ty, tx) = (b.y + y, b.x + x);
                for ch in 0..3 {
                    let v = a * p.rgba.get(ch, y, x) + (1.0 - a) * image.get(ch, ty, tx);
                    image.set(ch, ty, tx, v);
                }
                if a > coverage.get(0, ty, tx) {
                    coverage.set(0, ty, tx, a);
                }
                if a > 0.5 {
                    mask.set(0, ty, tx, 1.0);
                }
            }
        }
        placements.push(Placement {
            transcript: p.transcript.clone(),
            bbox: b,
            vertical: p.vertical,
        });
    }
    Ok(Composite {
        image,
        mask,
        coverage,
        placements,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    /// Inclusive range of patches attempted per image.
    pub patches: (usize, usize),
    pub glyph_height: (f64, f64),
    pub thickness: (f64, f64),
    pub spacing: (f64, f64),
    pub glyphs_per_patch: (usize, usize),
    pub max_rotation_deg: f64,
    pub vertical_probability: f64,
    /// Minimum long-edge pixels per character.
    pub min_ratio: f64,
    /// Largest patch long edge as a fraction of the image short edge.
    pub max_patch_fraction: f64,
    pub no_overlap: bool,
    pub train_fraction: f64,
    pub charset: String,
    pub degrade: DegradeConfig,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            patches: (1, 3),
            glyph_height: (16.0, 26.0),
            thickness: (0.17, 0.24),
            spacing: (0.25, 0.45),
            glyphs_per_patch: (1, 8),
            max_rotation_deg: 5.0,
            vertical_probability: 0.25,
            min_ratio: 12.0,
            max_patch_fraction: 0.9,
            no_overlap: true,
            train_fraction: 0.9,
            charset: glyphs::charset(),
            degrade: DegradeConfig::default(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        self.degrade.validate()?;
        let s = self.degrade.scale;
        if self.height == 0 || self.width == 0 || self.height % s != 0 || self.width % s != 0 {
            return Err(param_err!(
                "{}x{} images are not divisible by scale {s}",
                self.height,
                self.width
            ));
        }
        let ordered = |(a, b): (f64, f64)| a.is_finite() && b.is_finite() && 0.0 < a && a <= b;
        if !ordered(self.glyph_height) || !ordered(self.thickness) {
            return Err(param_err!("glyph height and thickness ranges must be positive and ordered"));
        }
        if self.spacing.0 < 0.0 || self.spacing.0 > self.spacing.1 {
            return Err(param_err!("invalid spacing range {:?}", self.spacing));
        }
        if self.patches.0 > self.patches.1 || self.glyphs_per_patch.0 == 0 || self.glyphs_per_patch.0 > self.glyphs_per_patch.1 {
            return Err(param_err!("invalid patch or glyph count range"));
        }
        if !(0.0..=1.0).contains(&self.vertical_probability) || !(0.0..=1.0).contains(&self.train_fraction) {
            return Err(param_err!("probabilities must lie in [0, 1]"));
        }
        if self.charset.is_empty() || self.charset.chars().any(|c| template(c).is_none()) {
            return Err(param_err!("charset must be a non-empty subset of the glyph atlas"));
        }
        Ok(())
    }
}

/// One dataset record.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleTriplet {
    pub x_l: Image,
    pub x_h: Image,
    pub mask: SegMask,
    pub transcripts: Vec<String>,
    pub boxes: Vec<BoxRect>,
    pub vertical: Vec<bool>,
    pub seed: u64,
    pub degradation: DegradeParams,
    pub background: String,
    /// Maximum patch alpha per pixel, before quantisation.
    pub coverage: Image,
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

fn draw(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Text colour far from the background: near black or near white.
fn text_color(bg_luma: f64, rng: &mut ChaCha8Rng) -> [f64; 3] {
    if bg_luma > 0.5 {
        [0, 1, 2].map(|_| rng.random_range(0.0..0.1))
    } else {
        [0, 1, 2].map(|_| rng.random_range(0.9..1.0))
    }
}

/// Patch draws attempted before a slot is left empty.
const PATCH_ATTEMPTS: usize = 64;

/// Generates one triplet; a pure function of `(cfg, backgrounds, seed)`.
pub fn synthesize_sample(cfg: &SynthConfig, backgrounds: &BackgroundSource, seed: u64) -> Result<SampleTriplet> {
    cfg.validate()?;
    let mut layout = stream(seed, 0);
    let (bg, bg_name) = backgrounds.sample(cfg.height, cfg.width, &mut layout);
    let bg_luma = bg.luma().iter().sum::<f64>() / (cfg.height * cfg.width) as f64;
    let n_patches = layout.random_range(cfg.patches.0..=cfg.patches.1);
    let short = cfg.height.min(cfg.width) as f64;
    let mut patches = Vec::with_capacity(n_patches);
    for k in 0..n_patches {
        let mut rng = stream(seed, 1 + k as u64);
        for _ in 0..PATCH_ATTEMPTS {
            let style = PatchStyle {
                glyph_height: draw(&mut rng, cfg.glyph_height),
                thickness: draw(&mut rng, cfg.thickness),
                spacing: draw(&mut rng, cfg.spacing),
                max_rotation_deg: cfg.max_rotation_deg,
                vertical: rng.random_bool(cfg.vertical_probability),
                color: text_color(bg_luma, &mut rng),
                glyphs: cfg.glyphs_per_patch,
            };
            let p = render_glyph_patch(rng.random(), &cfg.charset, &style)?;
            let long = p.width().max(p.height()) as f64;
            if filter_patch(&p, cfg.min_ratio)? && long <= cfg.max_patch_fraction * short {
                patches.push(p);
                break;
            }
        }
    }
    let comp = compose_sample(&bg, &patches, stream(seed, 1000).random(), cfg.no_overlap)?;
    let x_h = comp.image.quantized();
    let (x_l, degradation) = degrade(&x_h, &cfg.degrade, stream(seed, 2000).random())?;
    let x_l = x_l.quantized();
    Ok(SampleTriplet {
        x_l,
        x_h,
        mask: comp.mask,
        transcripts: comp.placements.iter().map(|p| p.transcript.clone()).collect(),
        boxes: comp.placements.iter().map(|p| p.bbox).collect(),
        vertical: comp.placements.iter().map(|p| p.vertical).collect(),
        seed,
        degradation,
        background: bg_name,
        coverage: comp.coverage,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub index: usize,
    pub seed: u64,
    pub split: Split,
    pub lr: String,
    pub hr: String,
    pub mask: String,
    pub transcripts: Vec<String>,
    pub boxes: Vec<BoxRect>,
    pub vertical: Vec<bool>,
    pub background: String,
    pub degradation: DegradeParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub root_seed: u64,
    pub config: SynthConfig,
    pub samples: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn load(root: &Path) -> Result<Self> {
        let p = root.join("manifest.json");
        let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.samples.iter().filter(move |e| e.split == split)
    }
}

/// Number of leading samples assigned to training.
pub fn train_count(n: usize, fraction: f64) -> usize {
    ((n as f64 * fraction).round() as usize).min(n)
}

/// Writes `n` triplets under `root` as `{lr,hr,mask}/NNNNNN.png` plus
/// `manifest.json`. Sample `i` uses seed `root_seed + i`.
pub fn generate_dataset(
    root: &Path,
    n: usize,
    cfg: &SynthConfig,
    root_seed: u64,
    backgrounds: &BackgroundSource,
) -> Result<Manifest> {
    if n == 0 {
        return Err(param_err!("dataset size must be at least 1"));
    }
    cfg.validate()?;
    for sub in ["lr", "hr", "mask"] {
        let d = root.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let n_train = train_count(n, cfg.train_fraction);
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let seed = root_seed.wrapping_add(i as u64);
        let s = synthesize_sample(cfg, backgrounds, seed)?;
        let name = format!("{i:06}.png");
        let rel = |sub: &str| format!("{sub}/{name}");
        s.x_l.save_png(&root.join(rel("lr")))?;
        s.x_h.save_png(&root.join(rel("hr")))?;
        s.mask.save_png(&root.join(rel("mask")))?;
        samples.push(ManifestEntry {
            index: i,
            seed,
            split: if i < n_train { Split::Train } else { Split::Test },
            lr: rel("lr"),
            hr: rel("hr"),
            mask: rel("mask"),
            transcripts: s.transcripts,
            boxes: s.boxes,
            vertical: s.vertical,
            background: s.background,
            degradation: s.degradation,
        });
    }
    let manifest = Manifest {
        root_seed,
        config: cfg.clone(),
        samples,
    };
    let p = root.join("manifest.json");
    std::fs::write(&p, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&p, e))?;
    Ok(manifest)
}

/// A triplet as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredSample {
    pub x_l: Image,
    pub x_h: Image,
    pub mask: SegMask,
    pub entry: ManifestEntry,
}

pub fn load_sample(root: &Path, entry: &ManifestEntry) -> Result<StoredSample> {
    let path = |rel: &str| -> PathBuf { root.join(rel) };
    Ok(StoredSample {
        x_l: Image::load_png(&path(&entry.lr), 3)?,
        x_h: Image::load_png(&path(&entry.hr), 3)?,
        mask: Image::load_png(&path(&entry.mask), 1)?,
        entry: entry.clone(),
    })
}
