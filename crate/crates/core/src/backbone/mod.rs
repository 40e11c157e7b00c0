//! Miniature latent-diffusion backbone: a deterministic image encoder, the
//! noise schedule, and a small cross-attention U-Net that predicts noise in
//! one step while exposing its raw attention scores.

mod prompt;
mod schedule;

pub use prompt::{
    locate_text_token, tokenize, PromptEmbedding, PromptEncoder, DEFAULT_PROMPT, TEXT_TOKEN, VOCAB,
};
pub use schedule::{add_noise, make_schedule, remove_noise, Schedule, ScheduleConfig};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{search_text_slice, AttnStack, CrossAttnLayer};
use crate::autograd::{Graph, Var};
use crate::error::{param_err, shape_err, Error, Result};
use crate::nn::{Conv2d, GroupNorm, Linear, LoraConfig, ResBlock};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UNetConfig {
    pub base_channels: usize,
    pub num_resolutions: usize,
    /// Number of cross-attention layers `M`.
    pub cross_attn_layers: usize,
    pub attn_heads: usize,
    pub latent_channels: usize,
    /// Encoder downsample factor `f`; a power of two.
    pub downsample: usize,
    /// Width of the prompt embedding rows.
    pub text_dim: usize,
    /// Width of the query/key space across all heads.
    pub attn_dim: usize,
    /// Adapter on every attention projection; `None` disables adapters.
    pub lora: Option<LoraConfig>,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            base_channels: 32,
            num_resolutions: 3,
            cross_attn_layers: 4,
            attn_heads: 1,
            latent_channels: 16,
            downsample: 4,
            text_dim: 32,
            attn_dim: 32,
            lora: Some(LoraConfig::default()),
        }
    }
}

impl UNetConfig {
    /// Attention sites available: one per down level plus one per up level.
    pub fn attention_sites(&self) -> usize {
        2 * self.num_resolutions - 1
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("base_channels", self.base_channels),
            ("num_resolutions", self.num_resolutions),
            ("cross_attn_layers", self.cross_attn_layers),
            ("attn_heads", self.attn_heads),
            ("latent_channels", self.latent_channels),
            ("downsample", self.downsample),
            ("text_dim", self.text_dim),
            ("attn_dim", self.attn_dim),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(param_err!("{name} must be positive"));
        }
        if !self.downsample.is_power_of_two() {
            return Err(param_err!("downsample {} is not a power of two", self.downsample));
        }
        if self.cross_attn_layers > self.attention_sites() {
            return Err(param_err!(
                "{} attention layers requested, the U-Net has {} sites",
                self.cross_attn_layers,
                self.attention_sites()
            ));
        }
        if self.attn_dim % self.attn_heads != 0 {
            return Err(param_err!(
                "attn_dim {} not divisible by {} heads",
                self.attn_dim,
                self.attn_heads
            ));
        }
        Ok(())
    }

    fn level_channels(&self, level: usize) -> usize {
        if level == 0 {
            self.base_channels
        } else {
            2 * self.base_channels
        }
    }
}

/// Deterministic convolutional encoder: stride-2 convolutions down to
/// `1/f` resolution, a residual block, and a 1x1 projection to `d` channels.
#[derive(Debug, Clone)]
pub struct Encoder {
    conv_in: Conv2d,
    downs: Vec<Conv2d>,
    block: ResBlock,
    norm_out: GroupNorm,
    conv_out: Conv2d,
    factor: usize,
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &UNetConfig, rng: &mut R) -> Self {
        let c = cfg.base_channels;
        let conv_in = Conv2d::new(store, "encoder.conv_in", 3, c, 3, 1, rng);
        let downs = (0..cfg.downsample.trailing_zeros())
            .map(|i| Conv2d::new(store, &format!("encoder.down{i}"), c, c, 3, 2, rng))
            .collect();
        let block = ResBlock::new(store, "encoder.block", c, c, rng);
        let norm_out = GroupNorm::new(store, "encoder.norm_out", c);
        let conv_out = Conv2d::new(store, "encoder.conv_out", c, cfg.latent_channels, 1, 1, rng);
        Self {
            conv_in,
            downs,
            block,
            norm_out,
            conv_out,
            factor: cfg.downsample,
        }
    }

    /// `[3, H, W]` image in `[0, 1]` to a `[d, H/f, W/f]` latent.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        if s.len() != 3 || s[0] != 3 {
            return Err(shape_err!("encoder expects a [3, H, W] image, got {s:?}"));
        }
        if s[1] == 0 || s[2] == 0 || s[1] % self.factor != 0 || s[2] % self.factor != 0 {
            return Err(shape_err!(
                "image {}x{} not divisible by downsample factor {}",
                s[1],
                s[2],
                self.factor
            ));
        }
        let centered = g.offset(x, -0.5);
        let mut h = self.conv_in.forward(g, centered);
        for d in &self.downs {
            h = g.silu(h);
            h = d.forward(g, h);
        }
        let h = self.block.forward(g, h, None);
        let h = self.norm_out.forward(g, h);
        let h = g.silu(h);
        Ok(self.conv_out.forward(g, h))
    }
}

/// Sinusoidal embedding of a step index, as a `[1, dim]` row.
pub fn timestep_embedding(t: usize, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut v = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half.max(1) as f64).exp();
        let arg = t as f64 * freq;
        v[i] = arg.sin();
        v[half + i] = arg.cos();
    }
    Tensor::new(&[1, dim], v).unwrap()
}

/// Residual block with a projected time-embedding bias.
#[derive(Debug, Clone)]
struct TimedBlock {
    block: ResBlock,
    temb: Linear,
}

impl TimedBlock {
    fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        temb_dim: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            block: ResBlock::new(store, name, c_in, c_out, rng),
            temb: Linear::new(store, &format!("{name}.temb"), temb_dim, c_out, true, rng),
        }
    }

    fn forward(&self, g: &mut Graph, x: Var, temb: Var) -> Var {
        let c = self.temb.forward(g, temb);
        let n = g.shape(c)[1];
        let c = g.reshape(c, &[n]);
        self.block.forward(g, x, Some(c))
    }
}

/// Multi-head cross-attention site; scores are averaged over heads.
#[derive(Debug, Clone)]
struct AttnSite {
    heads: Vec<CrossAttnLayer>,
}

impl AttnSite {
    fn forward(&self, g: &mut Graph, x: Var, c: Var) -> Result<(Var, Var)> {
        let (mut delta, mut scores) = self.heads[0].residual(g, x, c)?;
        for head in &self.heads[1..] {
            let (d, s) = head.residual(g, x, c)?;
            delta = g.add(delta, d);
            scores = g.add(scores, s);
        }
        let avg = g.scale(scores, 1.0 / self.heads.len() as f64);
        Ok((g.add(x, delta), avg))
    }
}

/// Output of one U-Net pass.
#[derive(Debug, Clone)]
pub struct UNetOutput {
    pub noise: Var,
    /// Raw `q k^T` score matrix of each attention layer in forward order.
    pub scores: Vec<Var>,
    pub score_dims: Vec<(usize, usize)>,
}

/// Small noise-prediction U-Net conditioned on a step index and prompt
/// rows through cross-attention.
#[derive(Debug, Clone)]
pub struct UNet {
    cfg: UNetConfig,
    temb1: Linear,
    temb2: Linear,
    conv_in: Conv2d,
    down_blocks: Vec<TimedBlock>,
    downsamplers: Vec<Conv2d>,
    mid: TimedBlock,
    up_blocks: Vec<TimedBlock>,
    upsamplers: Vec<Conv2d>,
    /// Indexed by site: down levels `0..R`, then up levels `R-2..=0`.
    attn: Vec<Option<AttnSite>>,
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

impl UNet {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        cfg: &UNetConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let r = cfg.num_resolutions;
        let tdim = 4 * cfg.base_channels;
        let temb1 = Linear::new(store, "unet.temb1", cfg.base_channels, tdim, true, rng);
        let temb2 = Linear::new(store, "unet.temb2", tdim, tdim, true, rng);
        let conv_in = Conv2d::new(
            store,
            "unet.conv_in",
            cfg.latent_channels,
            cfg.base_channels,
            3,
            1,
            rng,
        );

        let sites = cfg.attention_sites();
        let first_attn = sites - cfg.cross_attn_layers;
        let mut attn = Vec::with_capacity(sites);
        let make_site = |store: &mut ParamStore, site: usize, ch: usize, rng: &mut R| {
            if site < first_attn {
                return Ok(None);
            }
            let dh = cfg.attn_dim / cfg.attn_heads;
            let heads = (0..cfg.attn_heads)
                .map(|h| {
                    CrossAttnLayer::new(
                        store,
                        &format!("unet.attn{site}.head{h}"),
                        ch,
                        cfg.text_dim,
                        dh,
                        cfg.lora.as_ref(),
                        rng,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            Ok::<_, Error>(Some(AttnSite { heads }))
        };

        let mut down_blocks = Vec::with_capacity(r);
        let mut downsamplers = Vec::with_capacity(r - 1);
        let mut prev = cfg.base_channels;
        for level in 0..r {
            let ch = cfg.level_channels(level);
            down_blocks.push(TimedBlock::new(
                store,
                &format!("unet.down{level}"),
                prev,
                ch,
                tdim,
                rng,
            ));
            attn.push(make_site(store, level, ch, rng)?);
            if level + 1 < r {
                downsamplers.push(Conv2d::new(
                    store,
                    &format!("unet.downsample{level}"),
                    ch,
                    ch,
                    3,
                    2,
                    rng,
                ));
            }
            prev = ch;
        }
        let mid = TimedBlock::new(store, "unet.mid", prev, prev, tdim, rng);

        let mut up_blocks = Vec::with_capacity(r - 1);
        let mut upsamplers = Vec::with_capacity(r - 1);
        for (k, level) in (0..r - 1).rev().enumerate() {
            let ch = cfg.level_channels(level);
            upsamplers.push(Conv2d::new(
                store,
                &format!("unet.upsample{level}"),
                prev,
                prev,
                3,
                1,
                rng,
            ));
            up_blocks.push(TimedBlock::new(
                store,
                &format!("unet.up{level}"),
                prev + ch,
                ch,
                tdim,
                rng,
            ));
            attn.push(make_site(store, r + k, ch, rng)?);
            prev = ch;
        }
        let norm_out = GroupNorm::new(store, "unet.norm_out", prev);
        let conv_out = Conv2d::new(store, "unet.conv_out", prev, cfg.latent_channels, 3, 1, rng);
        Ok(Self {
            cfg: cfg.clone(),
            temb1,
            temb2,
            conv_in,
            down_blocks,
            downsamplers,
            mid,
            up_blocks,
            upsamplers,
            attn,
            norm_out,
            conv_out,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.cfg
    }

    /// Parameter of the last convolution, exposed so callers can zero it.
    pub fn output_conv(&self) -> &Conv2d {
        &self.conv_out
    }

    fn check_latent(&self, g: &Graph, z: Var) -> Result<(usize, usize)> {
        let s = g.shape(z);
        let step = 1usize << (self.cfg.num_resolutions - 1);
        if s.len() != 3 || s[0] != self.cfg.latent_channels {
            return Err(shape_err!(
                "latent must be [{}, h, w], got {s:?}",
                self.cfg.latent_channels
            ));
        }
        if s[1] == 0 || s[2] == 0 || s[1] % step != 0 || s[2] % step != 0 {
            return Err(shape_err!(
                "latent {}x{} must be a positive multiple of {step}",
                s[1],
                s[2]
            ));
        }
        Ok((s[1], s[2]))
    }

    pub fn forward(&self, g: &mut Graph, z: Var, t: usize, c: Var) -> Result<UNetOutput> {
        let (h0, w0) = self.check_latent(g, z)?;
        let cs = g.shape(c).to_vec();
        if cs.len() != 2 || cs[1] != self.cfg.text_dim || cs[0] == 0 {
            return Err(shape_err!(
                "prompt rows must be [L, {}], got {cs:?}",
                self.cfg.text_dim
            ));
        }
        let temb = g.constant(timestep_embedding(t, self.cfg.base_channels));
        let temb = self.temb1.forward(g, temb);
        let temb = g.silu(temb);
        let temb = self.temb2.forward(g, temb);
        let temb = g.silu(temb);

        let mut scores = Vec::new();
        let mut score_dims = Vec::new();
        let mut record = |v: Var, dims| {
            scores.push(v);
            score_dims.push(dims);
        };

        let r = self.cfg.num_resolutions;
        let mut h = self.conv_in.forward(g, z);
        let mut skips = Vec::with_capacity(r);
        let mut dims = (h0, w0);
        for level in 0..r {
            h = self.down_blocks[level].forward(g, h, temb);
            if let Some(site) = &self.attn[level] {
                let (out, s) = site.forward(g, h, c)?;
                h = out;
                record(s, dims);
            }
            if level + 1 < r {
                skips.push(h);
                h = self.downsamplers[level].forward(g, h);
                dims = (dims.0 / 2, dims.1 / 2);
            }
        }
        h = self.mid.forward(g, h, temb);
        for (k, skip) in skips.into_iter().rev().enumerate() {
            h = g.upsample_nearest2(h);
            h = self.upsamplers[k].forward(g, h);
            dims = (dims.0 * 2, dims.1 * 2);
            h = g.concat(&[h, skip]);
            h = self.up_blocks[k].forward(g, h, temb);
            if let Some(site) = &self.attn[r + k] {
                let (out, s) = site.forward(g, h, c)?;
                h = out;
                record(s, dims);
            }
        }
        let h = self.norm_out.forward(g, h);
        let h = g.silu(h);
        let noise = self.conv_out.forward(g, h);
        Ok(UNetOutput {
            noise,
            scores,
            score_dims,
        })
    }
}

/// `(z_L - beta_t * n) / alpha_t` on the tape.
pub fn invert_noise(g: &mut Graph, z: Var, noise: Var, t: usize, sch: &Schedule) -> Result<Var> {
    if g.shape(z) != g.shape(noise) {
        return Err(shape_err!(
            "latent {:?} and noise {:?} differ",
            g.shape(z),
            g.shape(noise)
        ));
    }
    let a = sch.alpha(t)?;
    if a == 0.0 {
        return Err(Error::SingularSchedule(t));
    }
    let b = sch.beta(t)?;
    let bn = g.scale(noise, b);
    let diff = g.sub(z, bn);
    Ok(g.scale(diff, 1.0 / a))
}

/// One denoising step: predicts noise with the U-Net and inverts it. The
/// returned stack holds every layer's raw scores and the keyword slices;
/// aggregation is left to the caller.
pub fn denoise_one_step(
    g: &mut Graph,
    unet: &UNet,
    z_l: Var,
    t: usize,
    prompt: &PromptEmbedding,
    sch: &Schedule,
) -> Result<(Var, AttnStack)> {
    sch.alpha(t)?;
    let out = unet.forward(g, z_l, t, prompt.embeddings)?;
    let z_h = invert_noise(g, z_l, out.noise, t, sch)?;
    let mut stack = AttnStack::new();
    for (&s, &dims) in out.scores.iter().zip(&out.score_dims) {
        stack.tex_maps.push(search_text_slice(g, s, prompt.tex_index, dims)?);
        stack.per_layer.push(s);
        stack.layer_dims.push(dims);
    }
    Ok((z_h, stack))
}
