//! Central finite-difference checks of the tape gradients of every loss
//! term and of the composed decoder blocks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autograd::{Graph, Var};
use crate::decoder::{Cdib, DecoderConfig, JointDecoder, decode_joint};
use crate::error::Result;
use crate::losses::{dice_loss, focal_loss, mf_loss, mse, LossWeights, PerceptualDistance, PyramidGradientDistance};
use crate::nn::LoraConfig;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Relative error bound for a pass.
pub const TOLERANCE: f64 = 1e-4;
/// Spatial side of every checked input.
pub const SIDE: usize = 8;
const STEP: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckRow {
    pub name: String,
    pub trials: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

type Build<'a> = dyn Fn(&mut Graph, &[Var]) -> Result<Var> + 'a;

/// `|a - b| / max(|a|, |b|)` over vectors, with a floor on the scale.
fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let (mut d, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        d += (x - y) * (x - y);
        na += x * x;
        nb += y * y;
    }
    d.sqrt() / na.sqrt().max(nb.sqrt()).max(1e-10)
}

fn eval(store: &ParamStore, inputs: &[Tensor], f: &Build) -> Result<f64> {
    let mut g = Graph::new();
    g.bind(store);
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    Ok(g.scalar(out))
}

/// Compares tape gradients with central differences: every input
/// coordinate, plus one random direction through all trainable parameters.
fn check(store: &ParamStore, inputs: &[Tensor], f: &Build, rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut g = Graph::new();
    g.bind(store);
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out);

    let mut worst: f64 = 0.0;
    for (i, t) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[i])
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; t.len()]);
        let mut numeric = Vec::with_capacity(t.len());
        let mut probe = inputs.to_vec();
        for j in 0..t.len() {
            let x0 = t.data()[j];
            probe[i].data_mut()[j] = x0 + STEP;
            let up = eval(store, &probe, f)?;
            probe[i].data_mut()[j] = x0 - STEP;
            let down = eval(store, &probe, f)?;
            probe[i].data_mut()[j] = x0;
            numeric.push((up - down) / (2.0 * STEP));
        }
        worst = worst.max(rel_err(&analytic, &numeric));
    }

    let ids: Vec<ParamId> = store.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
    if !ids.is_empty() {
        let dirs: Vec<Tensor> = ids
            .iter()
            .map(|&id| Tensor::randn(store.value(id).shape(), 1.0, rng))
            .collect();
        let mut analytic = 0.0;
        for (&id, d) in ids.iter().zip(&dirs) {
            if let Some(gp) = grads.get(g.param(id)) {
                analytic += gp.data().iter().zip(d.data()).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        let shifted = |sign: f64| -> Result<f64> {
            let mut s = store.clone();
            for (&id, d) in ids.iter().zip(&dirs) {
                let v = s.value_mut(id);
                for (w, dv) in v.data_mut().iter_mut().zip(d.data()) {
                    *w += sign * STEP * dv;
                }
            }
            eval(&s, inputs, f)
        };
        let numeric = (shifted(1.0)? - shifted(-1.0)?) / (2.0 * STEP);
        worst = worst.max(rel_err(&[analytic], &[numeric]));
    }
    Ok(worst)
}

fn image(rng: &mut ChaCha8Rng, c: usize) -> Tensor {
    Tensor::uniform(&[c, SIDE, SIDE], 0.0, 1.0, rng)
}

/// Soft mask kept away from 0 and 1 so clamps stay inactive.
fn soft_mask(rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(&[1, SIDE, SIDE], 0.05, 0.95, rng)
}

fn binary_mask(rng: &mut ChaCha8Rng) -> Tensor {
    let data = (0..SIDE * SIDE).map(|_| if rng.random_bool(0.3) { 1.0 } else { 0.0 }).collect();
    Tensor::new(&[1, SIDE, SIDE], data).expect("mask shape")
}

/// Fixed random readout turning a tensor output into a scalar.
fn readout(g: &mut Graph, out: Var, weights: &Tensor) -> Var {
    let w = g.constant(weights.clone());
    let p = g.mul(out, w);
    g.sum(p)
}

/// Replaces every parameter with random values so that zero-initialised
/// paths carry gradient.
fn randomize(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    let ids: Vec<ParamId> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        let shape = store.value(id).shape().to_vec();
        *store.value_mut(id) = Tensor::randn(&shape, 0.3, rng);
    }
}

/// The checks run by [`run_suite`].
pub const CHECKS: [&str; 7] = ["mse", "mf_loss", "focal_loss", "dice_loss", "perceptual", "cdib_forward", "decode_joint"];

fn run_one(name: &str, trials: usize, rng: &mut ChaCha8Rng) -> Result<f64> {
    let w = LossWeights::default();
    let empty = ParamStore::new();
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let err = match name {
            "mse" => {
                let (a, b) = (image(rng, 3), image(rng, 3));
                check(&empty, &[a], &|g, v| {
                    let b = g.constant(b.clone());
                    mse(g, v[0], b)
                }, rng)?
            }
            "mf_loss" => {
                let (xh, x, sh, s) = (image(rng, 3), image(rng, 3), soft_mask(rng), binary_mask(rng));
                check(&empty, &[xh, sh], &|g, v| {
                    let (x, s) = (g.constant(x.clone()), g.constant(s.clone()));
                    mf_loss(g, v[0], x, v[1], s, w.gamma)
                }, rng)?
            }
            "focal_loss" => {
                let (sh, s) = (soft_mask(rng), binary_mask(rng));
                check(&empty, &[sh], &|g, v| {
                    let s = g.constant(s.clone());
                    focal_loss(g, v[0], s, w.gamma)
                }, rng)?
            }
            "dice_loss" => {
                let (sh, s) = (soft_mask(rng), binary_mask(rng));
                check(&empty, &[sh], &|g, v| {
                    let s = g.constant(s.clone());
                    dice_loss(g, v[0], s, w.dice_smooth)
                }, rng)?
            }
            "perceptual" => {
                let (a, b) = (image(rng, 3), image(rng, 3));
                check(&empty, &[a], &|g, v| {
                    let b = g.constant(b.clone());
                    PyramidGradientDistance::default().distance(g, v[0], b)
                }, rng)?
            }
            "cdib_forward" => {
                let c = 8;
                let mut store = ParamStore::new();
                let cdib = Cdib::new(&mut store, "cdib", c, Some(&LoraConfig::default()), rng)?;
                randomize(&mut store, rng);
                let (z, a) = (image(rng, c), image(rng, c));
                let (rz, ra) = (Tensor::randn(&[c, SIDE, SIDE], 1.0, rng), Tensor::randn(&[c, SIDE, SIDE], 1.0, rng));
                check(&store, &[z, a], &|g, v| {
                    let (zo, ao) = cdib.forward(g, v[0], v[1])?;
                    let l1 = readout(g, zo, &rz);
                    let l2 = readout(g, ao, &ra);
                    Ok(g.add(l1, l2))
                }, rng)?
            }
            "decode_joint" => {
                let cfg = DecoderConfig {
                    latent_channels: 4,
                    attn_channels: 4,
                    stem_channels: 8,
                    level_channels: vec![8, 8, 8],
                    level_upsample: vec![2, 2, 1],
                    ..DecoderConfig::default()
                };
                let mut store = ParamStore::new();
                let dec = JointDecoder::new(&mut store, &cfg, rng)?;
                randomize(&mut store, rng);
                let side = SIDE / cfg.scale();
                let z = Tensor::randn(&[4, side, side], 1.0, rng);
                let a = Tensor::randn(&[4, side, side], 1.0, rng);
                let (ri, rm) = (Tensor::randn(&[3, SIDE, SIDE], 1.0, rng), Tensor::randn(&[1, SIDE, SIDE], 1.0, rng));
                check(&store, &[z, a], &|g, v| {
                    let (img, mask) = decode_joint(g, &dec, v[0], v[1])?;
                    let l1 = readout(g, img, &ri);
                    let l2 = readout(g, mask, &rm);
                    Ok(g.add(l1, l2))
                }, rng)?
            }
            other => return Err(crate::error::param_err!("unknown gradient check {other}")),
        };
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Runs every check for `trials` random draws each.
pub fn run_suite(trials: usize, seed: u64) -> Result<Vec<GradcheckRow>> {
    CHECKS
        .iter()
        .enumerate()
        .map(|(i, name)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let err = run_one(name, trials, &mut rng)?;
            Ok(GradcheckRow {
                name: name.to_string(),
                trials,
                max_rel_err: err,
                passed: err < TOLERANCE,
            })
        })
        .collect()
}

/// Plain-text table of suite results.
pub fn format_table(rows: &[GradcheckRow]) -> String {
    let mut s = format!("{:<14} {:>6} {:>12}  result\n", "check", "trials", "max rel err");
    for r in rows {
        s += &format!(
            "{:<14} {:>6} {:>12.3e}  {}\n",
            r.name,
            r.trials,
            r.max_rel_err,
            if r.passed { "pass" } else { "FAIL" }
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_on_a_few_trials() {
        let rows = run_suite(2, 11).unwrap();
        assert_eq!(rows.len(), CHECKS.len());
        for r in &rows {
            assert!(r.passed, "{r:?}");
        }
        assert!(format_table(&rows).contains("decode_joint"));
    }

    #[test]
    fn a_wrong_gradient_is_caught() {
        // d/dx of x^2 reported as x.
        let a = Tensor::new(&[2], vec![0.7, -1.3]).unwrap();
        let analytic: Vec<f64> = a.data().to_vec();
        let numeric: Vec<f64> = a.data().iter().map(|x| 2.0 * x).collect();
        assert!(rel_err(&analytic, &numeric) > TOLERANCE);
    }
}
