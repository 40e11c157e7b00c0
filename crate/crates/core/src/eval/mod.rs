//! Image, mask and text-fidelity metrics plus report emission.

pub mod recognizer;

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{param_err, shape_err, Error, Result};
use crate::image::{Image, SegMask};
use crate::synth::glyphs::atlas;
use crate::synth::BoxRect;
pub use recognizer::template_recognizer;

/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 8;
pub const SSIM_C1: f64 = 1e-4;
pub const SSIM_C2: f64 = 9e-4;

fn same_dims(a: &Image, b: &Image) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(shape_err!("image dims {:?} vs {:?}", a.dims(), b.dims()));
    }
    Ok(())
}

/// Peak signal-to-noise ratio for unit-range images, in dB.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    same_dims(a, b)?;
    let n = a.data().len().max(1) as f64;
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / n;
    Ok(psnr_from_mse(mse))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    }
}

/// Single-scale SSIM on luma with uniform `SSIM_WINDOW` windows at stride
/// one; images smaller than a window are treated as one window.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    same_dims(a, b)?;
    let (_, h, w) = a.dims();
    if h == 0 || w == 0 {
        return Err(shape_err!("ssim of an empty image"));
    }
    let (la, lb) = (a.luma(), b.luma());
    let (wh, ww) = (SSIM_WINDOW.min(h), SSIM_WINDOW.min(w));
    let n = (wh * ww) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for y0 in 0..=h - wh {
        for x0 in 0..=w - ww {
            let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for y in y0..y0 + wh {
                for x in x0..x0 + ww {
                    let (p, q) = (la[y * w + x], lb[y * w + x]);
                    sa += p;
                    sb += q;
                    saa += p * p;
                    sbb += q * q;
                    sab += p * q;
                }
            }
            let (ma, mb) = (sa / n, sb / n);
            let va = saa / n - ma * ma;
            let vb = sbb / n - mb * mb;
            let cov = sab / n - ma * mb;
            total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

fn mask_counts(pred: &SegMask, gt: &SegMask, threshold: f64) -> Result<(usize, usize, usize)> {
    same_dims(pred, gt)?;
    let (mut inter, mut p, mut g) = (0, 0, 0);
    for (a, b) in pred.data().iter().zip(gt.data()) {
        let (x, y) = (*a >= threshold, *b >= threshold);
        inter += (x && y) as usize;
        p += x as usize;
        g += y as usize;
    }
    Ok((inter, p, g))
}

/// Intersection over union of thresholded masks; two empty masks give 1.
pub fn iou(pred: &SegMask, gt: &SegMask, threshold: f64) -> Result<f64> {
    let (i, p, g) = mask_counts(pred, gt, threshold)?;
    let union = p + g - i;
    Ok(if union == 0 { 1.0 } else { i as f64 / union as f64 })
}

/// Dice coefficient of thresholded masks; two empty masks give 1.
pub fn dice_coef(pred: &SegMask, gt: &SegMask, threshold: f64) -> Result<f64> {
    let (i, p, g) = mask_counts(pred, gt, threshold)?;
    Ok(if p + g == 0 { 1.0 } else { 2.0 * i as f64 / (p + g) as f64 })
}

/// Unit-cost edit distance over chars.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut row: Vec<usize> = (0..=b.len()).collect();
    for (i, ca) in a.iter().enumerate() {
        let mut diag = row[0];
        row[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let next = (diag + (ca != cb) as usize).min(row[j] + 1).min(row[j + 1] + 1);
            diag = row[j + 1];
            row[j + 1] = next;
        }
    }
    row[b.len()]
}

/// `(len a + len b - dist) / (len a + len b)`, with two empty strings at 1.
pub fn lev_ratio(a: &str, b: &str) -> f64 {
    let total = a.chars().count() + b.chars().count();
    if total == 0 {
        return 1.0;
    }
    (total - levenshtein(a, b)) as f64 / total as f64
}

/// Mean per-box Levenshtein ratio between text read from `pred` and `gt`.
/// `None` when there are no boxes.
pub fn ocr_a<F>(pred: &Image, gt: &Image, boxes: &[BoxRect], recognize: F) -> Result<Option<f64>>
where
    F: Fn(&Image) -> String,
{
    same_dims(pred, gt)?;
    if boxes.is_empty() {
        return Ok(None);
    }
    let mut sum = 0.0;
    for b in boxes {
        if b.w == 0 || b.h == 0 || b.x + b.w > gt.width() || b.y + b.h > gt.height() {
            return Err(Error::Metadata(format!(
                "box {b:?} outside {}x{} image",
                gt.width(),
                gt.height()
            )));
        }
        let r_gt = recognize(&gt.crop(b.x, b.y, b.w, b.h)?);
        let r_pred = recognize(&pred.crop(b.x, b.y, b.w, b.h)?);
        sum += lev_ratio(&r_pred, &r_gt);
    }
    Ok(Some(sum / boxes.len() as f64))
}

/// `ocr_a` with the glyph-atlas recognizer.
pub fn ocr_a_default(pred: &Image, gt: &Image, boxes: &[BoxRect]) -> Result<Option<f64>> {
    ocr_a(pred, gt, boxes, |r| template_recognizer(r, atlas()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub id: String,
    pub psnr: f64,
    pub ssim: f64,
    pub iou: Option<f64>,
    pub dice: Option<f64>,
    pub ocr_a: Option<f64>,
}

/// Scores one prediction; mask metrics need both masks.
pub fn evaluate_sample(
    id: &str,
    pred: &Image,
    gt: &Image,
    masks: Option<(&SegMask, &SegMask)>,
    boxes: &[BoxRect],
) -> Result<SampleMetrics> {
    let (iou_v, dice_v) = match masks {
        Some((p, g)) => (Some(iou(p, g, 0.5)?), Some(dice_coef(p, g, 0.5)?)),
        None => (None, None),
    };
    Ok(SampleMetrics {
        id: id.to_owned(),
        psnr: psnr(pred, gt)?,
        ssim: ssim(pred, gt)?,
        iou: iou_v,
        dice: dice_v,
        ocr_a: ocr_a_default(pred, gt, boxes)?,
    })
}

/// Means over samples; optional metrics average the samples that have them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub psnr: f64,
    pub ssim: f64,
    pub iou: Option<f64>,
    pub dice: Option<f64>,
    pub ocr_a: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub config_hash: String,
    pub n_samples: usize,
    pub metrics: Aggregates,
    pub per_sample: Vec<SampleMetrics>,
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Hex SHA-256 of the compact JSON form of `config`.
pub fn config_hash(config: &serde_json::Value) -> String {
    hex::encode(Sha256::digest(config.to_string().as_bytes()))
}

impl MetricReport {
    pub fn new(config: &serde_json::Value, per_sample: Vec<SampleMetrics>) -> Result<Self> {
        if per_sample.is_empty() {
            return Err(param_err!("no samples to report"));
        }
        let metrics = Aggregates {
            psnr: mean(per_sample.iter().map(|s| s.psnr)).unwrap_or_default(),
            ssim: mean(per_sample.iter().map(|s| s.ssim)).unwrap_or_default(),
            iou: mean(per_sample.iter().filter_map(|s| s.iou)),
            dice: mean(per_sample.iter().filter_map(|s| s.dice)),
            ocr_a: mean(per_sample.iter().filter_map(|s| s.ocr_a)),
        };
        Ok(Self {
            config_hash: config_hash(config),
            n_samples: per_sample.len(),
            metrics,
            per_sample,
        })
    }

    pub fn to_markdown(&self) -> String {
        let opt = |v: Option<f64>| v.map_or("n/a".to_owned(), |v| format!("{v:.4}"));
        let mut s = String::from("| samples | PSNR | SSIM | IoU | Dice | OCR-A |\n|---|---|---|---|---|---|\n");
        let m = &self.metrics;
        s += &format!(
            "| {} | {:.2} | {:.4} | {} | {} | {} |\n",
            self.n_samples,
            m.psnr,
            m.ssim,
            opt(m.iou),
            opt(m.dice),
            opt(m.ocr_a)
        );
        s += "\n| id | PSNR | SSIM | IoU | Dice | OCR-A |\n|---|---|---|---|---|---|\n";
        for p in &self.per_sample {
            s += &format!(
                "| {} | {:.2} | {:.4} | {} | {} | {} |\n",
                p.id,
                p.psnr,
                p.ssim,
                opt(p.iou),
                opt(p.dice),
                opt(p.ocr_a)
            );
        }
        s
    }
}

/// Writes `report.json` and `report.md` into `dir`.
pub fn emit_report(dir: &Path, config: &serde_json::Value, per_sample: Vec<SampleMetrics>) -> Result<MetricReport> {
    let report = MetricReport::new(config, per_sample)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let json = dir.join("report.json");
    std::fs::write(&json, serde_json::to_string_pretty(&report)?).map_err(|e| Error::io(&json, e))?;
    let md = dir.join("report.md");
    std::fs::write(&md, report.to_markdown()).map_err(|e| Error::io(&md, e))?;
    Ok(report)
}

pub fn load_report(path: &Path) -> Result<MetricReport> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn gray(h: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> Image {
        let data = (0..h * w).map(|i| f(i / w, i % w)).collect();
        Image::new(1, h, w, data).unwrap()
    }

    #[test]
    fn psnr_closed_forms() {
        let a = Image::filled(3, 4, 4, 0.5);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        let b = Image::filled(3, 4, 4, 0.6);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        let c = Image::filled(3, 4, 4, 0.51);
        assert!((psnr(&a, &c).unwrap() - 40.0).abs() < 1e-9);
        assert!(psnr(&a, &Image::filled(3, 4, 5, 0.5)).is_err());
    }

    #[test]
    fn psnr_falls_as_noise_grows() {
        let base = gray(16, 16, |y, x| (y * 16 + x) as f64 / 255.0);
        let mut ordered = 0;
        for trial in 0..10 {
            let rng = &mut ChaCha8Rng::seed_from_u64(trial);
            let vals: Vec<f64> = [0.01, 0.05, 0.1]
                .iter()
                .map(|&s| {
                    let n = Normal::new(0.0, s).unwrap();
                    let mut noisy = base.clone();
                    for v in noisy.data_mut() {
                        *v += n.sample(rng);
                    }
                    psnr(&noisy, &base).unwrap()
                })
                .collect();
            ordered += (vals[0] > vals[1] && vals[1] > vals[2]) as usize;
        }
        assert!(ordered >= 9);
    }

    #[test]
    fn ssim_cases() {
        let a = gray(12, 12, |y, x| ((x * 7 + y * 3) % 11) as f64 / 10.0);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-9);
        let zero = Image::filled(1, 8, 8, 0.0);
        let one = Image::filled(1, 8, 8, 1.0);
        let v = ssim(&zero, &one).unwrap();
        // Luminance term alone: C1 / (1 + C1).
        assert!((v - SSIM_C1 / (1.0 + SSIM_C1)).abs() < 1e-12);
        let b = gray(12, 12, |y, x| ((x + y) % 5) as f64 / 4.0);
        assert_eq!(ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
    }

    #[test]
    fn mask_overlap_cases() {
        let sq = |x0: usize| gray(8, 8, move |y, x| (y < 4 && x >= x0 && x < x0 + 4) as u8 as f64);
        let a = sq(0);
        assert_eq!(iou(&a, &a, 0.5).unwrap(), 1.0);
        assert_eq!(iou(&a, &sq(4), 0.5).unwrap(), 0.0);
        assert!((iou(&a, &sq(2), 0.5).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert!((dice_coef(&a, &sq(2), 0.5).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn levenshtein_examples() {
        assert_eq!(levenshtein("abc", "abc"), 0);
        assert_eq!(lev_ratio("abc", "abc"), 1.0);
        assert_eq!(levenshtein("", "abc"), 3);
        assert_eq!(lev_ratio("", "abc"), 0.0);
        assert_eq!(levenshtein("kitten", "sitting"), 3);
        assert!((lev_ratio("kitten", "sitting") - 10.0 / 13.0).abs() < 1e-9);
        assert_eq!(lev_ratio("", ""), 1.0);
    }

    #[test]
    fn ocr_a_cases() {
        let gt = Image::filled(3, 20, 20, 0.5);
        let b = BoxRect { x: 0, y: 0, w: 10, h: 10 };
        let read = |r: &Image| if r.get(0, 0, 0) > 0.7 { "AB".to_owned() } else { String::new() };
        let bright = Image::filled(3, 20, 20, 0.9);
        assert_eq!(ocr_a(&bright, &bright, &[b], read).unwrap(), Some(1.0));
        assert_eq!(ocr_a(&gt, &bright, &[b], read).unwrap(), Some(0.0));
        assert_eq!(ocr_a(&gt, &gt, &[], read).unwrap(), None);
        let out = BoxRect { x: 15, y: 0, w: 10, h: 10 };
        assert!(matches!(ocr_a(&gt, &gt, &[out], read), Err(Error::Metadata(_))));
        // Per-box mean of 1.0 and 0.5.
        let mut mixed = bright.clone();
        for y in 0..10 {
            for x in 10..20 {
                for c in 0..3 {
                    mixed.set(c, y, x, 0.5);
                }
            }
        }
        let half = |r: &Image| if r.get(0, 0, 0) > 0.7 { "AB".to_owned() } else { "A".to_owned() };
        let right = BoxRect { x: 10, y: 0, w: 10, h: 10 };
        // "A" vs "AB": (1 + 2 - 1) / 3.
        let v = ocr_a(&mixed, &bright, &[b, right], half).unwrap().unwrap();
        assert!((v - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn report_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = serde_json::json!({"seed": 1});
        assert!(emit_report(dir.path(), &cfg, vec![]).is_err());
        let s = SampleMetrics {
            id: "000000".into(),
            psnr: 30.5,
            ssim: 0.91,
            iou: Some(0.7),
            dice: None,
            ocr_a: Some(0.8),
        };
        let r = emit_report(dir.path(), &cfg, vec![s.clone()]).unwrap();
        assert_eq!(r.metrics.psnr, s.psnr);
        assert_eq!(r.metrics.dice, None);
        assert_eq!(load_report(&dir.path().join("report.json")).unwrap(), r);
        assert!(dir.path().join("report.md").exists());
    }

    #[test]
    fn recognizer_reads_synthesized_transcripts() {
        let cfg = crate::synth::SynthConfig::default();
        for seed in 0..40 {
            let s = crate::synth::synthesize_sample(&cfg, &crate::synth::BackgroundSource::Procedural, seed).unwrap();
            for (b, t) in s.boxes.iter().zip(&s.transcripts) {
                let read = template_recognizer(&s.x_h.crop(b.x, b.y, b.w, b.h).unwrap(), atlas());
                assert_eq!(&read, t, "seed {seed}");
            }
        }
    }
}
