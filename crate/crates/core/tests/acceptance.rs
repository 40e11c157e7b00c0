//! Acceptance gate. Runs every criterion, prints one PASS/FAIL line per
//! criterion and exits non-zero if any fails.

use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use textsr::autograd::Graph;
use textsr::backbone::{add_noise, remove_noise, ScheduleConfig};
use textsr::decoder::Cdib;
use textsr::eval::{iou, lev_ratio, levenshtein, ocr_a_default, psnr, template_recognizer};
use textsr::gradcheck::run_suite;
use textsr::losses::{dice_loss, focal_loss, mf_loss, total_loss, LossWeights, PyramidGradientDistance};
use textsr::model::ModelConfig;
use textsr::nn::{Linear, LoraConfig, PointwiseConv};
use textsr::params::ParamStore;
use textsr::synth::glyphs::atlas;
use textsr::synth::{generate_dataset, load_sample, synthesize_sample, BackgroundSource, Split, SynthConfig};
use textsr::tensor::Tensor;
use textsr::train::{compute_step, load_split, train, train_on, TrainConfig};

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn cdib_identity() -> Outcome {
    let mut worst: f64 = 0.0;
    let r = &mut rng(1);
    for trial in 0..100 {
        let c = [4, 8, 16][trial % 3];
        let lora = (c >= 8).then(LoraConfig::default);
        let mut store = ParamStore::new();
        let cdib = Cdib::new(&mut store, "cdib", c, lora.as_ref(), r).map_err(|e| e.to_string())?;
        let (h, w) = (r.random_range(2..12), r.random_range(2..12));
        let z = Tensor::randn(&[c, h, w], 2.0, r);
        let a = Tensor::randn(&[c, h, w], 2.0, r);
        let mut g = Graph::new();
        g.bind(&store);
        let (zv, av) = (g.constant(z.clone()), g.constant(a.clone()));
        let (zo, ao) = cdib.forward(&mut g, zv, av).map_err(|e| e.to_string())?;
        worst = worst.max(max_abs_diff(g.value(zo), &z)).max(max_abs_diff(g.value(ao), &a));
    }
    ensure(worst == 0.0, format!("max abs diff {worst:e}"))?;
    Ok("100 random pairs, max abs diff 0".into())
}

fn lora_identity() -> Outcome {
    let mut worst: f64 = 0.0;
    let r = &mut rng(2);
    for trial in 0..100 {
        let mut store = ParamStore::new();
        let (d_in, d_out) = (r.random_range(4..24), r.random_range(4..24));
        let cfg = LoraConfig::default();
        let lin = Linear::new(&mut store, "lin", d_in, d_out, trial % 2 == 0, r)
            .with_lora(&mut store, "lin", &cfg, r)
            .map_err(|e| e.to_string())?;
        let conv = PointwiseConv::new(&mut store, "pw", d_in, d_out, Some(&cfg), r).map_err(|e| e.to_string())?;
        let mut g = Graph::new();
        g.bind(&store);
        let x = g.constant(Tensor::randn(&[r.random_range(1..10), d_in], 1.0, r));
        let (adapted, base) = (lin.forward(&mut g, x), lin.forward_base(&mut g, x));
        worst = worst.max(max_abs_diff(g.value(adapted), g.value(base)));
        let m = g.constant(Tensor::randn(&[d_in, 5, 6], 1.0, r));
        let adapted = conv.forward(&mut g, m);
        let base = conv.conv.forward(&mut g, m);
        worst = worst.max(max_abs_diff(g.value(adapted), g.value(base)));
    }
    ensure(worst == 0.0, format!("max abs diff {worst:e}"))?;
    Ok("100 random inputs (linear and 1x1 conv), max abs diff 0".into())
}

fn noise_round_trip() -> Outcome {
    let sch = ScheduleConfig::default().build().map_err(|e| e.to_string())?;
    let r = &mut rng(3);
    let mut report = Vec::new();
    for t in [1, 200, 999] {
        let z = Tensor::randn(&[16 * 16 * 16], 1.0, r);
        let n = Tensor::randn(&[16 * 16 * 16], 1.0, r);
        let noisy = add_noise(z.data(), n.data(), t, &sch).map_err(|e| e.to_string())?;
        let back = remove_noise(&noisy, n.data(), t, &sch).map_err(|e| e.to_string())?;
        let e64 = back.iter().zip(z.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let z32: Vec<f32> = z.data().iter().map(|&v| v as f32).collect();
        let n32: Vec<f32> = n.data().iter().map(|&v| v as f32).collect();
        let noisy32 = add_noise(&z32, &n32, t, &sch).map_err(|e| e.to_string())?;
        let back32 = remove_noise(&noisy32, &n32, t, &sch).map_err(|e| e.to_string())?;
        let e32 = back32.iter().zip(&z32).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
        ensure(e64 <= 1e-12, format!("t={t}: f64 error {e64:e}"))?;
        // Half an ulp of the stored noisy latent, amplified by 1/alpha_t.
        let alpha = sch.alpha(t).map_err(|e| e.to_string())?;
        let floor = noisy32.iter().map(|v| (v.abs() * f32::EPSILON / 2.0) as f64).fold(0.0, f64::max) / alpha;
        ensure(
            e32 <= 1e-6,
            format!("t={t}: f32 error {e32:.2e}, alpha {alpha:.2e}, f32 storage floor ~{floor:.2e}"),
        )?;
        report.push(format!("t={t} f64 {e64:.1e} f32 {e32:.1e}"));
    }
    Ok(report.join(", "))
}

fn gradient_suite() -> Outcome {
    let rows = run_suite(50, 4).map_err(|e| e.to_string())?;
    let summary = rows
        .iter()
        .map(|r| format!("{} {:.1e}", r.name, r.max_rel_err))
        .collect::<Vec<_>>()
        .join(", ");
    ensure(rows.iter().all(|r| r.passed), format!("failed: {summary}"))?;
    Ok(format!("50 trials each: {summary}"))
}

fn loss_degeneracies() -> Outcome {
    let r = &mut rng(5);
    let w = LossWeights::default();
    let mut worst_mf: f64 = 0.0;
    let mut worst_dice: f64 = 0.0;
    let mut worst_focal: f64 = 0.0;
    for _ in 0..20 {
        let side = 16;
        let mut s: Vec<f64> = (0..side * side).map(|_| if r.random_bool(0.3) { 1.0 } else { 0.0 }).collect();
        s[0] = 1.0;
        let s = Tensor::new(&[1, side, side], s).unwrap();
        let xh = Tensor::uniform(&[3, side, side], 0.0, 1.0, r);
        let x = Tensor::uniform(&[3, side, side], 0.0, 1.0, r);
        let mut g = Graph::new();
        let (sv, sh, xv, xhv) = (g.constant(s.clone()), g.constant(s.clone()), g.constant(x), g.constant(xh));
        let mf = mf_loss(&mut g, xhv, xv, sh, sv, w.gamma).map_err(|e| e.to_string())?;
        let dice = dice_loss(&mut g, sh, sv, w.dice_smooth).map_err(|e| e.to_string())?;
        let focal = focal_loss(&mut g, sh, sv, w.gamma).map_err(|e| e.to_string())?;
        worst_mf = worst_mf.max(g.scalar(mf).abs());
        worst_dice = worst_dice.max(g.scalar(dice).abs());
        worst_focal = worst_focal.max(g.scalar(focal).abs());

        let soft = Tensor::uniform(&[1, side, side], 0.0, 1.0, r);
        let shv = g.constant(soft);
        let terms = total_loss(&mut g, xhv, xv, shv, sv, &w, &PyramidGradientDistance::default(), false)
            .map_err(|e| e.to_string())?;
        let (tot, img, seg) = (g.scalar(terms.total), g.scalar(terms.img), g.scalar(terms.seg));
        ensure(tot == img + seg, format!("total {tot} != img {img} + seg {seg}"))?;
    }
    ensure(worst_mf == 0.0, format!("mf_loss {worst_mf:e} at s_hat = s"))?;
    ensure(worst_dice <= 1e-6, format!("dice {worst_dice:e} on identical masks"))?;
    ensure(worst_focal <= 1e-6, format!("focal {worst_focal:e} at perfect prediction"))?;
    Ok(format!(
        "mf {worst_mf:e}, dice {worst_dice:.1e}, focal {worst_focal:.1e}, total = img + seg exactly"
    ))
}

/// Exhaustive edit search: every alignment is explored, pruned only by
/// the best complete cost found so far.
fn brute_edit(a: &[u8], b: &[u8], cost: usize, best: &mut usize) {
    let rest = a.len().abs_diff(b.len());
    if cost + rest >= *best {
        return;
    }
    if a.is_empty() || b.is_empty() {
        *best = cost + a.len().max(b.len());
        return;
    }
    brute_edit(&a[1..], &b[1..], cost + (a[0] != b[0]) as usize, best);
    brute_edit(&a[1..], b, cost + 1, best);
    brute_edit(a, &b[1..], cost + 1, best);
}

fn random_string(r: &mut ChaCha8Rng, max_len: usize) -> String {
    let n = r.random_range(0..=max_len);
    (0..n).map(|_| (b'a' + r.random_range(0..3u8)) as char).collect()
}

fn levenshtein_oracle() -> Outcome {
    let r = &mut rng(6);
    for _ in 0..500 {
        let (a, b) = (random_string(r, 8), random_string(r, 8));
        let mut best = usize::MAX;
        brute_edit(a.as_bytes(), b.as_bytes(), 0, &mut best);
        ensure(levenshtein(&a, &b) == best, format!("{a:?} vs {b:?}: dp {} brute {best}", levenshtein(&a, &b)))?;
    }
    for _ in 0..1000 {
        let (a, b, c) = (random_string(r, 8), random_string(r, 8), random_string(r, 8));
        let (ab, ba, bc, ac) = (levenshtein(&a, &b), levenshtein(&b, &a), levenshtein(&b, &c), levenshtein(&a, &c));
        ensure(ab == ba, format!("symmetry fails on {a:?} {b:?}"))?;
        ensure((ab == 0) == (a == b), format!("identity fails on {a:?} {b:?}"))?;
        ensure(ac <= ab + bc, format!("triangle fails on {a:?} {b:?} {c:?}"))?;
    }
    let ratio = lev_ratio("kitten", "sitting");
    ensure((ratio - 10.0 / 13.0).abs() <= 1e-9, format!("kitten/sitting ratio {ratio}"))?;
    Ok(format!("500 brute-force pairs, 1000 metric triples, kitten/sitting {ratio:.6}"))
}

fn files_equal(a: &Path, b: &Path) -> bool {
    std::fs::read(a).ok() == std::fs::read(b).ok()
}

fn synthesis_closure() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = SynthConfig::default();
    let src = BackgroundSource::Procedural;
    let root_seed = 2024;
    let (d1, d2) = (dir.path().join("a"), dir.path().join("b"));
    let m = generate_dataset(&d1, 100, &cfg, root_seed, &src).map_err(|e| e.to_string())?;
    let m2 = generate_dataset(&d2, 100, &cfg, root_seed, &src).map_err(|e| e.to_string())?;
    ensure(m == m2, "manifests differ between runs")?;
    let mut boxes = 0;
    for e in &m.samples {
        for f in [&e.lr, &e.hr, &e.mask] {
            ensure(files_equal(&d1.join(f), &d2.join(f)), format!("{f} differs between runs"))?;
        }
        let fresh = synthesize_sample(&cfg, &src, e.seed).map_err(|err| err.to_string())?;
        for (mv, a) in fresh.mask.data().iter().zip(fresh.coverage.data()) {
            ensure((*mv == 1.0) == (*a > 0.5), format!("sample {}: mask and alpha disagree", e.index))?;
        }
        let stored = load_sample(&d1, e).map_err(|err| err.to_string())?;
        ensure(stored.mask == fresh.mask, format!("sample {}: stored mask differs", e.index))?;
        for (b, t) in e.boxes.iter().zip(&e.transcripts) {
            let crop = stored.x_h.crop(b.x, b.y, b.w, b.h).map_err(|err| err.to_string())?;
            let read = template_recognizer(&crop, atlas());
            ensure(&read == t, format!("sample {}: read {read:?}, expected {t:?}", e.index))?;
            boxes += 1;
        }
        if let Some(v) = ocr_a_default(&stored.x_h, &stored.x_h, &e.boxes).map_err(|err| err.to_string())? {
            ensure(v == 1.0, format!("sample {}: OCR-A {v}", e.index))?;
        }
    }
    let files = std::fs::read(d1.join("manifest.json")).ok() == std::fs::read(d2.join("manifest.json")).ok();
    ensure(files, "manifest files differ")?;
    Ok(format!("100 samples, {boxes} boxes read exactly, masks exact, regeneration bitwise identical"))
}

fn training_smoke() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let data = dir.path().join("data");
    let synth = SynthConfig {
        train_fraction: 200.0 / 220.0,
        ..SynthConfig::default()
    };
    generate_dataset(&data, 220, &synth, 1000, &BackgroundSource::Procedural).map_err(|e| e.to_string())?;
    let cfg = TrainConfig {
        max_steps: 2000,
        data_dir: data.clone(),
        out_dir: dir.path().join("run"),
        ..TrainConfig::default()
    };
    let out = train(&cfg).map_err(|e| e.to_string())?;
    let held_out = load_split(&data, Split::Test).map_err(|e| e.to_string())?;
    ensure(held_out.len() == 20, format!("{} held-out samples", held_out.len()))?;

    let first = out.log[0].loss_total;
    let tail = &out.log[out.log.len() - 100..];
    let last = tail.iter().map(|r| r.loss_total).sum::<f64>() / tail.len() as f64;
    let (mut sr, mut bicubic, mut mask_iou) = (0.0, 0.0, 0.0);
    for s in &held_out {
        let r = out.model.infer(&s.x_l).map_err(|e| e.to_string())?;
        sr += psnr(&r.image, &s.x_h).map_err(|e| e.to_string())?;
        bicubic += psnr(&r.upsampled, &s.x_h).map_err(|e| e.to_string())?;
        mask_iou += iou(&r.mask, &s.mask, 0.5).map_err(|e| e.to_string())?;
    }
    let n = held_out.len() as f64;
    let (sr, bicubic, mask_iou) = (sr / n, bicubic / n, mask_iou / n);
    let detail = format!(
        "loss {first:.3} -> {last:.3} ({:.0}%), PSNR {sr:.2} vs bicubic {bicubic:.2} (+{:.2} dB), IoU {mask_iou:.3}",
        100.0 * last / first,
        sr - bicubic
    );
    ensure(last <= 0.5 * first, format!("loss did not halve: {detail}"))?;
    ensure(sr - bicubic >= 0.5, format!("PSNR gain too small: {detail}"))?;
    ensure(mask_iou >= 0.5, format!("mask IoU too low: {detail}"))?;
    Ok(detail)
}

fn ablation_mechanics() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let data = dir.path().join("data");
    generate_dataset(&data, 4, &SynthConfig::default(), 77, &BackgroundSource::Procedural).map_err(|e| e.to_string())?;
    let samples = load_split(&data, Split::Train).map_err(|e| e.to_string())?;
    let run = |f: &dyn Fn(&mut ModelConfig)| {
        let mut cfg = TrainConfig {
            max_steps: 3,
            out_dir: dir.path().join("run"),
            ..TrainConfig::default()
        };
        f(&mut cfg.model);
        train_on(&cfg, &samples).map(|o| (cfg, o)).map_err(|e| e.to_string())
    };

    let (cfg, out) = run(&|m| m.ablation.use_mf_loss = false)?;
    ensure(out.log.iter().all(|r| r.loss_mf == 0.0), "mf contribution not exactly 0")?;
    let s = &samples[0];
    let step = compute_step(&out.model, &cfg.effective_loss(), &s.x_l, &s.x_h, &s.mask, 0).map_err(|e| e.to_string())?;
    ensure(step.record.loss_mf == 0.0, "mf contribution not exactly 0 after training")?;

    let (_, out) = run(&|m| m.ablation.use_taca = false)?;
    let a0 = out.model.infer(&samples[0].x_l).map_err(|e| e.to_string())?.aggregate;
    let a1 = out.model.infer(&samples[1].x_l).map_err(|e| e.to_string())?.aggregate;
    let flat = a0.data().chunks(a0.shape()[1] * a0.shape()[2]).all(|p| p.iter().all(|&v| v == p[0]));
    ensure(a0 == a1, format!("seg input depends on the image with TACA off: {}", max_abs_diff(&a0, &a1)))?;
    ensure(flat, "seg input is not spatially constant with TACA off")?;

    let (_, out) = run(&|m| m.ablation.use_jsd = false)?;
    let scales = out.model.decoder.residual_scales();
    let frozen = scales.iter().all(|&id| {
        let p = out.model.store.get(id);
        !p.trainable && p.value.data().iter().all(|&v| v == 0.0)
    });
    ensure(frozen && !out.model.decoder.interaction, "CDIB scales moved with JSD off")?;

    let (_, out) = run(&|_| {})?;
    let moved = out
        .model
        .decoder
        .residual_scales()
        .iter()
        .any(|&id| out.model.store.value(id).data()[0] != 0.0);
    ensure(moved, "CDIB scales did not train with JSD on")?;
    Ok("mf term exactly 0, TACA-off seg input constant, JSD-off scales frozen at 0".into())
}

type Criterion = (usize, &'static str, fn() -> Outcome, Duration);

fn main() -> ExitCode {
    let criteria: [Criterion; 9] = [
        (1, "CDIB identity at init", cdib_identity, Duration::from_secs(5)),
        (2, "LoRA identity at init", lora_identity, Duration::from_secs(5)),
        (3, "noise round trip", noise_round_trip, Duration::from_secs(5)),
        (4, "gradient suite", gradient_suite, Duration::from_secs(120)),
        (5, "loss degeneracies", loss_degeneracies, Duration::from_secs(5)),
        (6, "Levenshtein oracle", levenshtein_oracle, Duration::from_secs(30)),
        (7, "synthesis closure", synthesis_closure, Duration::from_secs(120)),
        (8, "training smoke", training_smoke, Duration::from_secs(1800)),
        (9, "ablation mechanics", ablation_mechanics, Duration::from_secs(60)),
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|v| v.parse().ok());
    let mut failed = 0;
    for (id, name, f, limit) in criteria {
        if only.is_some_and(|o| o != id) {
            continue;
        }
        let start = Instant::now();
        let outcome = f();
        let took = start.elapsed();
        let outcome = match outcome {
            Ok(d) if took > limit => Err(format!("took {took:.1?}, limit {limit:?}; {d}")),
            other => other,
        };
        match outcome {
            Ok(d) => println!("criterion {id} PASS  {name} ({took:.1?}): {d}"),
            Err(d) => {
                failed += 1;
                println!("criterion {id} FAIL  {name} ({took:.1?}): {d}");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
