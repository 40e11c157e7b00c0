//! The full super-resolution network: bicubic pre-upsampling, encoder,
//! one-step denoising U-Net, attention aggregation and joint decoders.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{AttnAggregator, AttnStack};
use crate::autograd::{Graph, Var};
use crate::backbone::{denoise_one_step, Encoder, PromptEncoder, Schedule, ScheduleConfig, UNet, UNetConfig, DEFAULT_PROMPT};
use crate::decoder::{DecoderConfig, JointDecoder};
use crate::error::{param_err, shape_err, Result};
use crate::image::{upscale_bicubic, Image};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Switches for the three ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablation {
    /// Cross-decoder interaction; off freezes every residual scale at zero.
    pub use_jsd: bool,
    /// Text-aware attention features; off feeds the seg decoder a learned
    /// constant.
    pub use_taca: bool,
    pub use_mf_loss: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            use_jsd: true,
            use_taca: true,
            use_mf_loss: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub unet: UNetConfig,
    pub decoder: DecoderConfig,
    pub schedule: ScheduleConfig,
    /// Denoising step, 0-based.
    pub t: usize,
    /// Low-res to high-res factor.
    pub scale: usize,
    pub prompt: Vec<String>,
    pub ablation: Ablation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            unet: UNetConfig::default(),
            decoder: DecoderConfig::default(),
            schedule: ScheduleConfig::default(),
            t: 200,
            scale: 4,
            prompt: DEFAULT_PROMPT.iter().map(|s| s.to_string()).collect(),
            ablation: Ablation::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.unet.validate()?;
        self.decoder.validate()?;
        let sch = self.schedule.build()?;
        sch.alpha(self.t)?;
        if self.decoder.latent_channels != self.unet.latent_channels {
            return Err(param_err!(
                "decoder latent channels {} != encoder latent channels {}",
                self.decoder.latent_channels,
                self.unet.latent_channels
            ));
        }
        if self.decoder.scale() != self.unet.downsample {
            return Err(param_err!(
                "decoder upsamples by {} but the encoder downsamples by {}",
                self.decoder.scale(),
                self.unet.downsample
            ));
        }
        if self.scale == 0 {
            return Err(param_err!("scale must be positive"));
        }
        Ok(())
    }
}

/// Clamp applied to the bicubic prior before taking logits.
const PRIOR_EPS: f64 = 1e-3;

/// All parameters plus the modules that index into them.
#[derive(Debug, Clone)]
pub struct TextSrModel {
    cfg: ModelConfig,
    pub store: ParamStore,
    encoder: Encoder,
    unet: UNet,
    prompt: PromptEncoder,
    aggregator: AttnAggregator,
    pub decoder: JointDecoder,
    /// `[d_a, 1, 1]` stand-in for the attention features when TACA is off.
    pub constant_features: ParamId,
    schedule: Schedule,
}

/// Nodes of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub image: Var,
    pub mask: Var,
    /// Features fed to the seg decoder.
    pub a_tex: Var,
    pub z_l: Var,
    pub z_h: Var,
    pub attention: AttnStack,
    /// Bicubic upsample of the input.
    pub upsampled: Image,
}

impl TextSrModel {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let rng = &mut ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = Encoder::new(&mut store, &cfg.unet, rng);
        let unet = UNet::new(&mut store, &cfg.unet, rng)?;
        let prompt = PromptEncoder::new(&mut store, cfg.unet.text_dim, rng);
        let aggregator = AttnAggregator::new(&mut store, cfg.unet.cross_attn_layers, cfg.decoder.attn_channels, rng);
        let mut decoder = JointDecoder::new(&mut store, &cfg.decoder, rng)?;
        let constant_features = store.add(
            "seg_input.constant",
            Tensor::randn(&[cfg.decoder.attn_channels, 1, 1], 1.0, rng),
        );
        if !cfg.ablation.use_jsd {
            for id in decoder.residual_scales() {
                store.set_trainable(id, false);
            }
            decoder.interaction = false;
        }
        if cfg.ablation.use_taca {
            store.set_trainable(constant_features, false);
        } else {
            store.set_trainable(aggregator.w_a, false);
        }
        Ok(Self {
            cfg: cfg.clone(),
            store,
            encoder,
            unet,
            prompt,
            aggregator,
            decoder,
            constant_features,
            schedule: cfg.schedule.build()?,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Output size for a low-res input of size `(h, w)`.
    pub fn output_dims(&self, h: usize, w: usize) -> (usize, usize) {
        (h * self.cfg.scale, w * self.cfg.scale)
    }

    fn check_input(&self, x_l: &Image) -> Result<()> {
        let (c, h, w) = x_l.dims();
        let (oh, ow) = self.output_dims(h, w);
        // The U-Net halves the latent `num_resolutions - 1` times.
        let step = self.cfg.unet.downsample << (self.cfg.unet.num_resolutions - 1);
        if c != 3 || h == 0 || w == 0 || oh % step != 0 || ow % step != 0 {
            return Err(shape_err!(
                "input [{c}, {h}, {w}] must be RGB with upsampled sides divisible by {step}"
            ));
        }
        Ok(())
    }

    /// Runs the network on `g`, which must already be bound to `self.store`.
    pub fn forward(&self, g: &mut Graph, x_l: &Image) -> Result<ForwardPass> {
        self.check_input(x_l)?;
        let upsampled = upscale_bicubic(x_l, self.cfg.scale).clamp01();
        let x = g.constant(upsampled.to_tensor());
        let z_l = self.encoder.forward(g, x)?;
        let prompt = self.prompt.embed(g, &self.cfg.prompt)?;
        let (z_h, mut attention) = denoise_one_step(g, &self.unet, z_l, self.cfg.t, &prompt, &self.schedule)?;
        let dims = (g.shape(z_h)[1], g.shape(z_h)[2]);
        let a_tex = if self.cfg.ablation.use_taca {
            self.aggregator.forward(g, &attention.tex_maps, dims)?
        } else {
            let c = g.param(self.constant_features);
            g.resize_bilinear(c, dims.0, dims.1)
        };
        attention.aggregated = Some(a_tex);
        let prior = g.constant(
            upsampled
                .to_tensor()
                .map(|v| {
                    let p = v.clamp(PRIOR_EPS, 1.0 - PRIOR_EPS);
                    (p / (1.0 - p)).ln()
                }),
        );
        let out = self.decoder.forward(g, z_h, a_tex, Some(prior))?;
        Ok(ForwardPass {
            image: out.image,
            mask: out.mask,
            a_tex,
            z_l,
            z_h,
            attention,
            upsampled,
        })
    }

    /// Inference without gradient bookkeeping for the caller.
    pub fn infer(&self, x_l: &Image) -> Result<Inference> {
        let mut g = Graph::new();
        g.bind(&self.store);
        let f = self.forward(&mut g, x_l)?;
        Ok(Inference {
            image: Image::from_tensor(g.value(f.image))?,
            mask: Image::from_tensor(g.value(f.mask))?,
            tex_maps: f.attention.tex_maps.iter().map(|&v| g.value(v).clone()).collect(),
            aggregate: g.value(f.a_tex).clone(),
            upsampled: f.upsampled,
        })
    }
}

/// Outputs of one inference pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    pub image: Image,
    pub mask: Image,
    /// Keyword attention slice of each cross-attention layer, `[1, h, w]`.
    pub tex_maps: Vec<Tensor>,
    /// Aggregated features `[d_a, h, w]` fed to the seg decoder.
    pub aggregate: Tensor,
    pub upsampled: Image,
}

impl Inference {
    /// Channel mean of the aggregated features, `[h, w]`.
    pub fn aggregate_map(&self) -> Tensor {
        let s = self.aggregate.shape();
        let (c, hw) = (s[0], s[1] * s[2]);
        let mut out = vec![0.0; hw];
        for ch in 0..c {
            for (o, v) in out.iter_mut().zip(&self.aggregate.data()[ch * hw..(ch + 1) * hw]) {
                *o += v / c as f64;
            }
        }
        Tensor::new(&[s[1], s[2]], out).expect("aggregate map shape")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::background::{procedural, BackgroundKind};

    fn input(seed: u64) -> Image {
        let img = procedural(BackgroundKind::Noise, 16, 16, &mut ChaCha8Rng::seed_from_u64(seed));
        img.quantized()
    }

    #[test]
    fn fresh_model_returns_bicubic_and_valid_mask() {
        let m = TextSrModel::new(&ModelConfig::default(), 1).unwrap();
        let out = m.infer(&input(2)).unwrap();
        assert_eq!(out.image.dims(), (3, 64, 64));
        assert_eq!(out.mask.dims(), (1, 64, 64));
        assert!(out.mask.is_valid());
        let diff = out
            .image
            .data()
            .iter()
            .zip(out.upsampled.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-9, "{diff}");
        assert_eq!(out.tex_maps.len(), 4);
        assert_eq!(m.infer(&input(2)).unwrap(), out);
    }

    #[test]
    fn rejects_bad_inputs_and_configs() {
        let m = TextSrModel::new(&ModelConfig::default(), 1).unwrap();
        assert!(m.infer(&Image::filled(3, 10, 16, 0.5)).is_err());
        assert!(m.infer(&Image::filled(1, 16, 16, 0.5)).is_err());
        let mut cfg = ModelConfig::default();
        cfg.decoder.latent_channels = 8;
        assert!(TextSrModel::new(&cfg, 0).is_err());
        let cfg = ModelConfig {
            t: 1000,
            ..ModelConfig::default()
        };
        assert!(TextSrModel::new(&cfg, 0).is_err());
    }

    #[test]
    fn ablations_change_structure() {
        let mut cfg = ModelConfig::default();
        cfg.ablation.use_taca = false;
        cfg.ablation.use_jsd = false;
        let m = TextSrModel::new(&cfg, 3).unwrap();
        assert!(!m.decoder.interaction);
        for id in m.decoder.residual_scales() {
            assert!(!m.store.get(id).trainable);
        }
        let a = m.infer(&input(4)).unwrap().aggregate;
        let b = m.infer(&input(5)).unwrap().aggregate;
        assert_eq!(a, b);
    }
}
