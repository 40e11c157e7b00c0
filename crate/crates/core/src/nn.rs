//! Layer building blocks: convolutions, group norm, residual blocks, linear
//! maps and low-rank adapters.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{param_err, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub const GN_EPS: f64 = 1e-5;

/// Groups for a group norm over `channels`: 8, or fewer when 8 does not
/// divide the channel count.
pub fn norm_groups(channels: usize) -> usize {
    (1..=8.min(channels))
        .rev()
        .find(|g| channels % g == 0)
        .unwrap_or(1)
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = c_in * kernel * kernel;
        let weight = store.add_he(
            format!("{name}.weight"),
            &[c_out, c_in, kernel, kernel],
            fan_in,
            1.0,
            rng,
        );
        let bias = Some(store.add(format!("{name}.bias"), Tensor::zeros(&[c_out])));
        Self {
            weight,
            bias,
            stride,
            pad: kernel / 2,
        }
    }

    /// Convolution whose weights and bias start at exactly zero.
    pub fn zeroed(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, kernel: usize) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            Tensor::zeros(&[c_out, c_in, kernel, kernel]),
        );
        let bias = Some(store.add(format!("{name}.bias"), Tensor::zeros(&[c_out])));
        Self {
            weight,
            bias,
            stride: 1,
            pad: kernel / 2,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        g.conv2d(x, w, b, self.stride, self.pad)
    }
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[channels])),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels])),
            groups: norm_groups(channels),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.group_norm(x, gamma, beta, self.groups, GN_EPS)
    }
}

/// Pre-activation residual block: `x + conv(silu(gn(conv(silu(gn(x))))))`,
/// with a 1x1 projection on the skip path when channel counts differ and an
/// optional per-channel conditioning vector added after the first conv.
#[derive(Debug, Clone)]
pub struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        rng: &mut R,
    ) -> Self {
        let norm1 = GroupNorm::new(store, &format!("{name}.norm1"), c_in);
        let conv1 = Conv2d::new(store, &format!("{name}.conv1"), c_in, c_out, 3, 1, rng);
        let norm2 = GroupNorm::new(store, &format!("{name}.norm2"), c_out);
        let conv2 = Conv2d::new(store, &format!("{name}.conv2"), c_out, c_out, 3, 1, rng);
        // Residual branch starts damped.
        let w = store.value_mut(conv2.weight);
        *w = w.map(|v| 0.3 * v);
        let skip = (c_in != c_out)
            .then(|| Conv2d::new(store, &format!("{name}.skip"), c_in, c_out, 1, 1, rng));
        Self {
            norm1,
            conv1,
            norm2,
            conv2,
            skip,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var, cond: Option<Var>) -> Var {
        let h = self.norm1.forward(g, x);
        let h = g.silu(h);
        let mut h = self.conv1.forward(g, h);
        if let Some(c) = cond {
            h = g.add_channel_bias(h, c);
        }
        let h = self.norm2.forward(g, h);
        let h = g.silu(h);
        let h = self.conv2.forward(g, h);
        let s = match &self.skip {
            Some(conv) => conv.forward(g, x),
            None => x,
        };
        g.add(s, h)
    }
}

/// Low-rank adapter `scale * up * down`.
///
/// Stored in column-vector orientation: `down` is `rank x d_in`, `up` is
/// `d_out x rank`. `up` is zero at creation so the adapted map equals the
/// base map exactly.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 4,
            alpha: 4.0,
        }
    }
}

impl LoraConfig {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

#[derive(Debug, Clone)]
pub struct LoraAdapter {
    pub rank: usize,
    pub scale: f64,
    pub down: ParamId,
    pub up: ParamId,
}

impl LoraAdapter {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        cfg: &LoraConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if cfg.rank == 0 || cfg.rank > d_in.min(d_out) {
            return Err(param_err!(
                "LoRA rank {} must be in 1..={} for a {d_in}->{d_out} map",
                cfg.rank,
                d_in.min(d_out)
            ));
        }
        let down = store.add(
            format!("{name}.lora_down"),
            Tensor::randn(&[cfg.rank, d_in], 1.0 / (d_in as f64).sqrt(), rng),
        );
        let up = store.add(format!("{name}.lora_up"), Tensor::zeros(&[d_out, cfg.rank]));
        Ok(Self {
            rank: cfg.rank,
            scale: cfg.scale(),
            down,
            up,
        })
    }

    pub fn param_count(&self, store: &ParamStore) -> usize {
        store.value(self.down).len() + store.value(self.up).len()
    }

    /// Adapter delta for row-major tokens `x: [N, d_in]`, giving `[N, d_out]`.
    fn delta_rows(&self, g: &mut Graph, x: Var) -> Var {
        let down = g.param(self.down);
        let up = g.param(self.up);
        let down_t = g.transpose(down);
        let up_t = g.transpose(up);
        let h = g.matmul(x, down_t);
        let d = g.matmul(h, up_t);
        g.scale(d, self.scale)
    }

    /// Adapter delta for a channel-first map `x: [d_in, H, W]`.
    fn delta_map(&self, g: &mut Graph, x: Var) -> Var {
        let (r, c) = (g.shape(g.param(self.down))[0], g.shape(g.param(self.down))[1]);
        let o = g.shape(g.param(self.up))[0];
        let down = g.param(self.down);
        let up = g.param(self.up);
        let down4 = g.reshape(down, &[r, c, 1, 1]);
        let up4 = g.reshape(up, &[o, r, 1, 1]);
        let h = g.conv2d(x, down4, None, 1, 0);
        let d = g.conv2d(h, up4, None, 1, 0);
        g.scale(d, self.scale)
    }
}

/// Linear map on row tokens `[N, d_in] -> [N, d_out]`, optionally adapted.
/// The base weight is stored as `[d_in, d_out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub lora: Option<LoraAdapter>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            Tensor::randn(&[d_in, d_out], 1.0 / (d_in as f64).sqrt(), rng),
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[d_out])));
        Self {
            weight,
            bias,
            lora: None,
        }
    }

    pub fn with_lora<R: Rng + ?Sized>(
        mut self,
        store: &mut ParamStore,
        name: &str,
        cfg: &LoraConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let s = store.value(self.weight).shape().to_vec();
        self.lora = Some(LoraAdapter::new(store, name, s[0], s[1], cfg, rng)?);
        Ok(self)
    }

    /// Base map only, ignoring any adapter.
    pub fn forward_base(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.weight);
        let y = g.matmul(x, w);
        match self.bias {
            Some(b) => {
                let b = g.param(b);
                g.add_row_bias(y, b)
            }
            None => y,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let base = self.forward_base(g, x);
        match &self.lora {
            Some(l) => {
                let d = l.delta_rows(g, x);
                g.add(base, d)
            }
            None => base,
        }
    }
}

/// 1x1 convolution with an optional low-rank adapter.
#[derive(Debug, Clone)]
pub struct PointwiseConv {
    pub conv: Conv2d,
    pub lora: Option<LoraAdapter>,
}

impl PointwiseConv {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        lora: Option<&LoraConfig>,
        rng: &mut R,
    ) -> Result<Self> {
        let conv = Conv2d::new(store, name, c_in, c_out, 1, 1, rng);
        let lora = lora
            .map(|cfg| LoraAdapter::new(store, name, c_in, c_out, cfg, rng))
            .transpose()?;
        Ok(Self { conv, lora })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let base = self.conv.forward(g, x);
        match &self.lora {
            Some(l) => {
                let d = l.delta_map(g, x);
                g.add(base, d)
            }
            None => base,
        }
    }
}

/// Plain-tensor adapted linear map: `x * W + scale * (x * down^T) * up^T`,
/// with `x: [N, d_in]` and `base_weight: [d_in, d_out]`.
pub fn lora_forward(
    base_weight: &Tensor,
    adapter_down: &Tensor,
    adapter_up: &Tensor,
    scale: f64,
    input: &Tensor,
) -> Result<Tensor> {
    let (bs, ds, us, xs) = (
        base_weight.shape(),
        adapter_down.shape(),
        adapter_up.shape(),
        input.shape(),
    );
    if bs.len() != 2 || xs.len() != 2 || xs[1] != bs[0] || ds != [ds[0], bs[0]] || us != [bs[1], ds[0]]
    {
        return Err(crate::error::Error::Shape(format!(
            "lora_forward: base {bs:?}, down {ds:?}, up {us:?}, input {xs:?}"
        )));
    }
    if ds[0] > bs[0].min(bs[1]) {
        return Err(param_err!("LoRA rank {} exceeds min(d_in, d_out)", ds[0]));
    }
    let mut g = Graph::new();
    let x = g.constant(input.clone());
    let w = g.constant(base_weight.clone());
    let down = g.constant(adapter_down.clone());
    let up = g.constant(adapter_up.clone());
    let base = g.matmul(x, w);
    let dt = g.transpose(down);
    let ut = g.transpose(up);
    let h = g.matmul(x, dt);
    let d = g.matmul(h, ut);
    let d = g.scale(d, scale);
    let y = g.add(base, d);
    Ok(g.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn norm_groups_divides() {
        assert_eq!(norm_groups(32), 8);
        assert_eq!(norm_groups(8), 8);
        assert_eq!(norm_groups(4), 4);
        assert_eq!(norm_groups(12), 6);
        assert_eq!(norm_groups(1), 1);
    }

    #[test]
    fn lora_rank_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let cfg = LoraConfig { rank: 5, alpha: 5.0 };
        assert!(LoraAdapter::new(&mut store, "a", 4, 32, &cfg, &mut rng).is_err());
        let cfg = LoraConfig { rank: 0, alpha: 1.0 };
        assert!(LoraAdapter::new(&mut store, "b", 4, 32, &cfg, &mut rng).is_err());
    }

    #[test]
    fn lora_param_count_rank4_width32() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let a = LoraAdapter::new(&mut store, "q", 32, 32, &LoraConfig::default(), &mut rng).unwrap();
        assert_eq!(a.param_count(&store), 2 * 4 * 32);
    }

    #[test]
    fn zero_scale_gives_base_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = Tensor::randn(&[6, 5], 1.0, &mut rng);
        let down = Tensor::randn(&[2, 6], 1.0, &mut rng);
        let up = Tensor::randn(&[5, 2], 1.0, &mut rng);
        let x = Tensor::randn(&[3, 6], 1.0, &mut rng);
        let base = lora_forward(&w, &down, &Tensor::zeros(&[5, 2]), 1.0, &x).unwrap();
        let scaled = lora_forward(&w, &down, &up, 0.0, &x).unwrap();
        assert_eq!(base, scaled);
        let adapted = lora_forward(&w, &down, &up, 1.0, &x).unwrap();
        assert!(adapted.max_abs_diff(&base) > 0.0);
    }

    #[test]
    fn pointwise_adapter_starts_as_identity_delta() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let plain = PointwiseConv::new(&mut store, "p", 6, 4, Some(&LoraConfig::default()), &mut rng)
            .unwrap();
        let x0 = Tensor::randn(&[6, 5, 5], 1.0, &mut rng);
        let mut g = Graph::new();
        g.bind(&store);
        let x = g.constant(x0);
        let a = plain.forward(&mut g, x);
        let b = plain.conv.forward(&mut g, x);
        assert_eq!(g.value(a).max_abs_diff(g.value(b)), 0.0);
    }
}
