//! Joint image and text-segmentation decoders coupled by cross-decoder
//! interaction blocks.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{param_err, shape_err, Result};
use crate::nn::{Conv2d, GroupNorm, LoraConfig, PointwiseConv, ResBlock};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// One branch of an interaction block.
#[derive(Debug, Clone)]
pub struct CdibBranch {
    res1: ResBlock,
    res2: ResBlock,
    split: PointwiseConv,
    norm: GroupNorm,
    merge: PointwiseConv,
    pub residual_scale: ParamId,
}

impl CdibBranch {
    fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        lora: Option<&LoraConfig>,
        rng: &mut R,
    ) -> Result<Self> {
        let half = channels / 2;
        Ok(Self {
            res1: ResBlock::new(store, &format!("{name}.res1"), channels, channels, rng),
            res2: ResBlock::new(store, &format!("{name}.res2"), channels, channels, rng),
            split: PointwiseConv::new(store, &format!("{name}.split"), channels, channels, lora, rng)?,
            norm: GroupNorm::new(store, &format!("{name}.norm"), half),
            merge: PointwiseConv::new(store, &format!("{name}.merge"), half, channels, lora, rng)?,
            residual_scale: store.add(format!("{name}.residual_scale"), Tensor::zeros(&[1])),
        })
    }

    /// ResBlocks, 1x1 conv, then the (keep, send) halves.
    fn prepare(&self, g: &mut Graph, x: Var) -> (Var, Var) {
        let h = self.res1.forward(g, x, None);
        let h = self.res2.forward(g, h, None);
        let h = self.split.forward(g, h);
        let half = g.shape(h)[0] / 2;
        let keep = g.slice_channels(h, 0, half);
        let send = g.slice_channels(h, half, half);
        (keep, send)
    }

    fn finish(&self, g: &mut Graph, x: Var, keep: Var, received: Var) -> Var {
        let gate = g.sigmoid(received);
        let h = g.mul(keep, gate);
        let h = self.norm.forward(g, h);
        let h = g.silu(h);
        let h = self.merge.forward(g, h);
        let s = g.param(self.residual_scale);
        let h = g.mul_scalar(h, s);
        g.add(x, h)
    }

    /// Last convolution of the branch; zeroing it silences the branch.
    pub fn merge_conv(&self) -> &Conv2d {
        &self.merge.conv
    }
}

/// Cross-Decoder Interaction Block: each branch keeps half of its features
/// and gates them with the sigmoid of the half sent by the other branch.
#[derive(Debug, Clone)]
pub struct Cdib {
    pub image: CdibBranch,
    pub seg: CdibBranch,
    channels: usize,
}

impl Cdib {
    /// Adapters, when given, go on the image branch's 1x1 convolutions.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        lora: Option<&LoraConfig>,
        rng: &mut R,
    ) -> Result<Self> {
        if channels == 0 || channels % 2 != 0 {
            return Err(shape_err!("interaction block needs an even channel count, got {channels}"));
        }
        Ok(Self {
            image: CdibBranch::new(store, &format!("{name}.image"), channels, lora, rng)?,
            seg: CdibBranch::new(store, &format!("{name}.seg"), channels, None, rng)?,
            channels,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn residual_scales(&self) -> [ParamId; 2] {
        [self.image.residual_scale, self.seg.residual_scale]
    }

    pub fn forward(&self, g: &mut Graph, z: Var, a: Var) -> Result<(Var, Var)> {
        let (zs, as_) = (g.shape(z).to_vec(), g.shape(a).to_vec());
        if zs.len() != 3 || as_.len() != 3 {
            return Err(shape_err!("interaction inputs must be [C, H, W]: {zs:?}, {as_:?}"));
        }
        if zs[0] % 2 != 0 || as_[0] % 2 != 0 {
            return Err(shape_err!("odd channel count: {zs:?}, {as_:?}"));
        }
        if zs[1..] != as_[1..] {
            return Err(shape_err!("spatial mismatch: {zs:?} vs {as_:?}"));
        }
        if zs[0] != self.channels || as_[0] != self.channels {
            return Err(shape_err!(
                "block built for {} channels, got {zs:?} and {as_:?}",
                self.channels
            ));
        }
        let (zk, zsend) = self.image.prepare(g, z);
        let (ak, asend) = self.seg.prepare(g, a);
        let z_out = self.image.finish(g, z, zk, asend);
        let a_out = self.seg.finish(g, a, ak, zsend);
        Ok((z_out, a_out))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecoderConfig {
    /// Channels of the denoised latent fed to the image decoder.
    pub latent_channels: usize,
    /// Channels of the aggregated attention map fed to the seg decoder.
    pub attn_channels: usize,
    /// Feature width at the decoder input.
    pub stem_channels: usize,
    /// Feature width after each level; must be even.
    pub level_channels: Vec<usize>,
    /// Upsampling factor (1 or 2) at each level.
    pub level_upsample: Vec<usize>,
    /// Adapter on the image branch 1x1 convolutions.
    pub lora: Option<LoraConfig>,
    /// Initial bias of the seg output logit.
    pub seg_bias_init: f64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            latent_channels: 16,
            attn_channels: 16,
            stem_channels: 32,
            level_channels: vec![32, 16, 16],
            level_upsample: vec![2, 2, 1],
            lora: Some(LoraConfig::default()),
            seg_bias_init: -2.0,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_channels == 0 || self.attn_channels == 0 || self.stem_channels == 0 {
            return Err(param_err!("decoder channel counts must be positive"));
        }
        if self.level_channels.is_empty() || self.level_channels.len() != self.level_upsample.len() {
            return Err(param_err!(
                "decoder needs one upsample factor per level: {:?} vs {:?}",
                self.level_channels,
                self.level_upsample
            ));
        }
        if let Some(c) = self.level_channels.iter().find(|&&c| c == 0 || c % 2 != 0) {
            return Err(param_err!("level width {c} must be even and positive"));
        }
        if let Some(u) = self.level_upsample.iter().find(|&&u| u != 1 && u != 2) {
            return Err(param_err!("upsample factor {u} must be 1 or 2"));
        }
        Ok(())
    }

    /// Total spatial magnification from latent to output.
    pub fn scale(&self) -> usize {
        self.level_upsample.iter().product()
    }
}

#[derive(Debug, Clone)]
struct Stream {
    conv_in: Conv2d,
    block: ResBlock,
    levels: Vec<Conv2d>,
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

impl Stream {
    fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cfg: &DecoderConfig,
        c_in: usize,
        c_out: usize,
        rng: &mut R,
    ) -> Self {
        let conv_in = Conv2d::new(store, &format!("{name}.conv_in"), c_in, cfg.stem_channels, 3, 1, rng);
        let block = ResBlock::new(store, &format!("{name}.block"), cfg.stem_channels, cfg.stem_channels, rng);
        let mut prev = cfg.stem_channels;
        let levels = cfg
            .level_channels
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let conv = Conv2d::new(store, &format!("{name}.level{i}"), prev, c, 3, 1, rng);
                prev = c;
                conv
            })
            .collect();
        let norm_out = GroupNorm::new(store, &format!("{name}.norm_out"), prev);
        let conv_out = Conv2d::new(store, &format!("{name}.conv_out"), prev, c_out, 3, 1, rng);
        Self {
            conv_in,
            block,
            levels,
            norm_out,
            conv_out,
        }
    }

    fn stem(&self, g: &mut Graph, x: Var) -> Var {
        let h = self.conv_in.forward(g, x);
        self.block.forward(g, h, None)
    }

    fn level(&self, g: &mut Graph, i: usize, x: Var, up: usize) -> Var {
        let h = if up == 2 { g.upsample_nearest2(x) } else { x };
        let h = g.silu(h);
        self.levels[i].forward(g, h)
    }

    fn head(&self, g: &mut Graph, x: Var) -> Var {
        let h = self.norm_out.forward(g, x);
        let h = g.silu(h);
        self.conv_out.forward(g, h)
    }
}

/// Image decoder and segmentation decoder run in lockstep, with an
/// interaction block after every level.
#[derive(Debug, Clone)]
pub struct JointDecoder {
    cfg: DecoderConfig,
    image: Stream,
    seg: Stream,
    pub cdibs: Vec<Cdib>,
    /// When false the interaction blocks are skipped; with zero residual
    /// scales this gives the same outputs.
    pub interaction: bool,
}

/// Decoder outputs: the image in `[0, 1]` and the mask in `[0, 1]`, plus the
/// pre-sigmoid logits.
#[derive(Debug, Clone, Copy)]
pub struct Decoded {
    pub image: Var,
    pub mask: Var,
    pub image_logits: Var,
    pub mask_logits: Var,
}

impl JointDecoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &DecoderConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let image = Stream::new(store, "decoder.image", cfg, cfg.latent_channels, 3, rng);
        let seg = Stream::new(store, "decoder.seg", cfg, cfg.attn_channels, 1, rng);
        // The image head starts silent so an additive prior passes through.
        *store.value_mut(image.conv_out.weight) = Tensor::zeros(store.value(image.conv_out.weight).shape());
        let sw = store.value_mut(seg.conv_out.weight);
        *sw = sw.map(|v| 0.3 * v);
        *store.value_mut(seg.conv_out.bias.expect("conv has bias")) = Tensor::full(&[1], cfg.seg_bias_init);
        let cdibs = cfg
            .level_channels
            .iter()
            .enumerate()
            .map(|(i, &c)| Cdib::new(store, &format!("decoder.cdib{i}"), c, cfg.lora.as_ref(), rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cfg: cfg.clone(),
            image,
            seg,
            cdibs,
            interaction: true,
        })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.cfg
    }

    pub fn residual_scales(&self) -> Vec<ParamId> {
        self.cdibs.iter().flat_map(|c| c.residual_scales()).collect()
    }

    /// Output spatial size for a latent of size `(h, w)`.
    pub fn output_dims(&self, h: usize, w: usize) -> (usize, usize) {
        (h * self.cfg.scale(), w * self.cfg.scale())
    }

    /// `prior`, when given, is a `[3, H, W]` logit map added to the image
    /// head before the sigmoid.
    pub fn forward(&self, g: &mut Graph, z: Var, a: Var, prior: Option<Var>) -> Result<Decoded> {
        let (zs, as_) = (g.shape(z).to_vec(), g.shape(a).to_vec());
        if zs.len() != 3 || zs[0] != self.cfg.latent_channels {
            return Err(shape_err!(
                "latent must be [{}, h, w], got {zs:?}",
                self.cfg.latent_channels
            ));
        }
        if as_.len() != 3 || as_[0] != self.cfg.attn_channels {
            return Err(shape_err!(
                "attention features must be [{}, h, w], got {as_:?}",
                self.cfg.attn_channels
            ));
        }
        if zs[1..] != as_[1..] || zs[1] == 0 || zs[2] == 0 {
            return Err(shape_err!("latent {zs:?} and attention {as_:?} differ spatially"));
        }
        let (oh, ow) = self.output_dims(zs[1], zs[2]);
        if let Some(p) = prior {
            if g.shape(p) != [3, oh, ow] {
                return Err(shape_err!("prior {:?} != [3, {oh}, {ow}]", g.shape(p)));
            }
        }
        let mut zi = self.image.stem(g, z);
        let mut ai = self.seg.stem(g, a);
        for (i, &up) in self.cfg.level_upsample.iter().enumerate() {
            zi = self.image.level(g, i, zi, up);
            ai = self.seg.level(g, i, ai, up);
            if self.interaction {
                (zi, ai) = self.cdibs[i].forward(g, zi, ai)?;
            }
        }
        let mut image_logits = self.image.head(g, zi);
        if let Some(p) = prior {
            image_logits = g.add(image_logits, p);
        }
        let mask_logits = self.seg.head(g, ai);
        Ok(Decoded {
            image: g.sigmoid(image_logits),
            mask: g.sigmoid(mask_logits),
            image_logits,
            mask_logits,
        })
    }
}

/// Decodes a denoised latent and aggregated attention features into the
/// super-resolved image and its text mask.
pub fn decode_joint(g: &mut Graph, dec: &JointDecoder, z_h: Var, a_tex: Var) -> Result<(Var, Var)> {
    let d = dec.forward(g, z_h, a_tex, None)?;
    Ok((d.image, d.mask))
}
