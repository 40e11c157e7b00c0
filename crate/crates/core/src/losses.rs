//! Training objective: image reconstruction terms, the boundary-weighted
//! gradient loss, segmentation terms, and a pluggable perceptual distance.
//!
//! Every loss is built on the autograd tape and reduced by mean.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

pub const SOBEL_X: [f64; 9] = [-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0];
pub const SOBEL_Y: [f64; 9] = [-1.0, -2.0, -1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 1.0];
const BINOMIAL: [f64; 9] = [
    1.0 / 16.0,
    2.0 / 16.0,
    1.0 / 16.0,
    2.0 / 16.0,
    4.0 / 16.0,
    2.0 / 16.0,
    1.0 / 16.0,
    2.0 / 16.0,
    1.0 / 16.0,
];

/// Prediction clamp used by the focal loss.
pub const FOCAL_CLAMP: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_perceptual: f64,
    pub lambda_mf: f64,
    pub lambda_focal: f64,
    pub lambda_dice: f64,
    pub gamma: f64,
    pub dice_smooth: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_perceptual: 5.0,
            lambda_mf: 10.0,
            lambda_focal: 10.0,
            lambda_dice: 1.0,
            gamma: 2.0,
            dice_smooth: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda_perceptual,
            self.lambda_mf,
            self.lambda_focal,
            self.lambda_dice,
            self.gamma,
            self.dice_smooth,
        ];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Parameter(format!("loss weights must be finite and >= 0: {self:?}")));
        }
        Ok(())
    }
}

fn same_shape(g: &Graph, a: Var, b: Var, what: &str) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return Err(shape_err!("{what}: {:?} vs {:?}", g.shape(a), g.shape(b)));
    }
    Ok(())
}

fn check_unit(g: &Graph, m: Var, what: &str) -> Result<()> {
    if g.value(m).data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Domain(format!("{what} has values outside [0, 1]")));
    }
    Ok(())
}

fn check_mask(g: &Graph, m: Var, what: &str) -> Result<()> {
    let s = g.shape(m);
    if s.len() != 3 || s[0] != 1 {
        return Err(shape_err!("{what} must be [1, H, W], got {s:?}"));
    }
    check_unit(g, m, what)
}

/// Horizontal and vertical Sobel responses of every channel, replicate
/// padded, stacked as `[2C, H, W]` (channel-major, x before y).
pub fn sobel(g: &mut Graph, x: Var) -> Var {
    g.stencil3(x, &[SOBEL_X, SOBEL_Y])
}

pub fn mse(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    same_shape(g, a, b, "mse")?;
    let d = g.sub(a, b);
    let d2 = g.square(d);
    Ok(g.mean(d2))
}

/// Per-pixel misclassification probability `1 - s_hat*s - (1-s_hat)(1-s)`.
pub fn misclassification(g: &mut Graph, s_hat: Var, s: Var) -> Var {
    let both = g.mul(s_hat, s);
    let ns_hat = g.one_minus(s_hat);
    let ns = g.one_minus(s);
    let neither = g.mul(ns_hat, ns);
    let correct = g.add(both, neither);
    g.one_minus(correct)
}

/// Boundary-weighted gradient loss: mean of `w^gamma * (sobel(x_hat) -
/// sobel(x))^2` with `w` the misclassification probability.
pub fn mf_loss(g: &mut Graph, x_hat: Var, x: Var, s_hat: Var, s: Var, gamma: f64) -> Result<Var> {
    same_shape(g, x_hat, x, "mf_loss images")?;
    same_shape(g, s_hat, s, "mf_loss masks")?;
    check_mask(g, s_hat, "predicted mask")?;
    check_mask(g, s, "target mask")?;
    let (c, h, w) = g.value(x).chw()?;
    if g.shape(s)[1..] != [h, w] {
        return Err(shape_err!("mask {:?} does not cover a {h}x{w} image", g.shape(s)));
    }
    let weight = misclassification(g, s_hat, s);
    let weight = g.pow(weight, gamma);
    let weight = g.concat(&vec![weight; 2 * c]);
    let gh = sobel(g, x_hat);
    let gt = sobel(g, x);
    let d = g.sub(gh, gt);
    let d2 = g.square(d);
    let wd = g.mul(weight, d2);
    Ok(g.mean(wd))
}

/// `mean(-(1 - p_t)^gamma * log p_t)` with `p_t = s_hat*s + (1-s_hat)(1-s)`
/// and `s_hat` clamped away from 0 and 1.
pub fn focal_loss(g: &mut Graph, s_hat: Var, s: Var, gamma: f64) -> Result<Var> {
    same_shape(g, s_hat, s, "focal_loss")?;
    let p = g.clamp(s_hat, FOCAL_CLAMP, 1.0 - FOCAL_CLAMP);
    let both = g.mul(p, s);
    let np = g.one_minus(p);
    let ns = g.one_minus(s);
    let neither = g.mul(np, ns);
    let pt = g.add(both, neither);
    let logp = g.log(pt);
    let q = g.one_minus(pt);
    let wq = g.pow(q, gamma);
    let l = g.mul(wq, logp);
    let m = g.mean(l);
    Ok(g.scale(m, -1.0))
}

/// `1 - (2 sum(s_hat*s) + eps) / (sum(s_hat) + sum(s) + eps)`.
pub fn dice_loss(g: &mut Graph, s_hat: Var, s: Var, eps: f64) -> Result<Var> {
    same_shape(g, s_hat, s, "dice_loss")?;
    let inter = g.mul(s_hat, s);
    let inter = g.sum(inter);
    let num = g.scale(inter, 2.0);
    let num = g.offset(num, eps);
    let a = g.sum(s_hat);
    let b = g.sum(s);
    let den = g.add(a, b);
    let den = g.offset(den, eps);
    let ratio = g.div(num, den);
    Ok(g.one_minus(ratio))
}

/// A differentiable image distance with `d(x, x) = 0` and `d >= 0`.
pub trait PerceptualDistance {
    fn distance(&self, g: &mut Graph, a: Var, b: Var) -> Result<Var>;
}

/// Mean L1 distance between Sobel responses over a Gaussian pyramid.
/// Levels stop early when a side becomes odd or shorter than 2 pixels.
#[derive(Debug, Clone, Copy)]
pub struct PyramidGradientDistance {
    pub levels: usize,
}

impl Default for PyramidGradientDistance {
    fn default() -> Self {
        Self { levels: 3 }
    }
}

impl PerceptualDistance for PyramidGradientDistance {
    fn distance(&self, g: &mut Graph, a: Var, b: Var) -> Result<Var> {
        same_shape(g, a, b, "perceptual distance")?;
        g.value(a).chw()?;
        let (mut pa, mut pb) = (a, b);
        let mut terms = Vec::new();
        for level in 0..self.levels.max(1) {
            if level > 0 {
                let s = g.shape(pa);
                if s[1] % 2 != 0 || s[2] % 2 != 0 || s[1] < 2 || s[2] < 2 {
                    break;
                }
                let ba = g.stencil3(pa, &[BINOMIAL]);
                let bb = g.stencil3(pb, &[BINOMIAL]);
                pa = g.avg_pool2(ba);
                pb = g.avg_pool2(bb);
            }
            let ga = sobel(g, pa);
            let gb = sobel(g, pb);
            let d = g.sub(ga, gb);
            let d = g.abs(d);
            terms.push(g.mean(d));
        }
        let n = terms.len();
        let mut total = terms[0];
        for &t in &terms[1..] {
            total = g.add(total, t);
        }
        Ok(g.scale(total, 1.0 / n as f64))
    }
}

/// Individual loss nodes of one evaluation. Weighted contributions are what
/// enter the totals.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub total: Var,
    pub img: Var,
    pub seg: Var,
    pub img_mse: Var,
    pub perceptual: Var,
    /// `lambda_mf * mf_loss`; a constant zero when `lambda_mf` is zero.
    pub mf_weighted: Var,
    pub seg_mse: Var,
    pub focal: Var,
    pub dice: Var,
}

/// `mse + lambda_perceptual * perceptual + lambda_mf * mf`, returned as
/// `(img, mse, perceptual, weighted mf)`.
///
/// `mf_mask` is the predicted mask used in the gradient weight; pass a
/// detached copy to stop the image loss reaching the seg branch.
#[allow(clippy::too_many_arguments)]
pub fn img_loss(
    g: &mut Graph,
    x_hat: Var,
    x: Var,
    mf_mask: Var,
    s: Var,
    w: &LossWeights,
    perceptual: &dyn PerceptualDistance,
) -> Result<(Var, Var, Var, Var)> {
    w.validate()?;
    let m = mse(g, x_hat, x)?;
    let p = perceptual.distance(g, x_hat, x)?;
    let wp = g.scale(p, w.lambda_perceptual);
    let mut img = g.add(m, wp);
    let mf_weighted = if w.lambda_mf == 0.0 {
        check_mask(g, mf_mask, "predicted mask")?;
        check_mask(g, s, "target mask")?;
        g.constant(Tensor::scalar(0.0))
    } else {
        let mf = mf_loss(g, x_hat, x, mf_mask, s, w.gamma)?;
        g.scale(mf, w.lambda_mf)
    };
    img = g.add(img, mf_weighted);
    Ok((img, m, p, mf_weighted))
}

/// `mse + lambda_focal * focal + lambda_dice * dice`, returned as
/// `(seg, mse, focal, dice)`.
pub fn seg_loss(g: &mut Graph, s_hat: Var, s: Var, w: &LossWeights) -> Result<(Var, Var, Var, Var)> {
    w.validate()?;
    check_unit(g, s_hat, "predicted mask")?;
    check_unit(g, s, "target mask")?;
    let m = mse(g, s_hat, s)?;
    let f = focal_loss(g, s_hat, s, w.gamma)?;
    let d = dice_loss(g, s_hat, s, w.dice_smooth)?;
    let wf = g.scale(f, w.lambda_focal);
    let wd = g.scale(d, w.lambda_dice);
    let seg = g.add(m, wf);
    let seg = g.add(seg, wd);
    Ok((seg, m, f, d))
}

/// `img_loss + seg_loss`. When `detach_mf_mask` is set the predicted mask
/// enters the gradient weight as a constant.
#[allow(clippy::too_many_arguments)]
pub fn total_loss(
    g: &mut Graph,
    x_hat: Var,
    x: Var,
    s_hat: Var,
    s: Var,
    w: &LossWeights,
    perceptual: &dyn PerceptualDistance,
    detach_mf_mask: bool,
) -> Result<LossTerms> {
    let mf_mask = if detach_mf_mask { g.detach(s_hat) } else { s_hat };
    let (img, img_mse, perc, mf_weighted) = img_loss(g, x_hat, x, mf_mask, s, w, perceptual)?;
    let (seg, seg_mse, focal, dice) = seg_loss(g, s_hat, s, w)?;
    let total = g.add(img, seg);
    Ok(LossTerms {
        total,
        img,
        seg,
        img_mse,
        perceptual: perc,
        mf_weighted,
        seg_mse,
        focal,
        dice,
    })
}

/// Evaluates a loss on plain tensors and returns its value.
pub fn evaluate(inputs: &[&Tensor], f: impl FnOnce(&mut Graph, &[Var]) -> Result<Var>) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant((*t).clone())).collect();
    let out = f(&mut g, &vars)?;
    Ok(g.scalar(out))
}
