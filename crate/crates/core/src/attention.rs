//! Text-token cross-attention: the attention layer itself, extraction of the
//! slice that responds to the keyword token, multi-layer aggregation into a
//! spatial feature map, and heatmap rendering.

use std::path::Path;

use rand::Rng;
use serde::Serialize;

use crate::autograd::{Graph, Var};
use crate::error::{param_err, shape_err, Error, Result};
use crate::image::{resize, Filter, Image};
use crate::nn::{GroupNorm, Linear, LoraConfig};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Query/key/value projections for one attention layer. Weights are stored
/// row-major as `[d_in, d_model]`, so tokens multiply on the left.
#[derive(Debug, Clone)]
pub struct AttnWeights {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
}

/// Result of [`cross_attention`]: the attended values and the raw,
/// pre-softmax score matrix `q k^T` of shape `[tokens_img, L]`.
#[derive(Debug, Clone, Copy)]
pub struct AttnOutput {
    pub out: Var,
    pub scores: Var,
}

/// `softmax(q k^T / sqrt(d)) v` with `q = z W_q`, `k = c W_k`, `v = c W_v`.
///
/// `z` is `[N, d_img]` image tokens, `c` is `[L, d_text]` prompt rows.
pub fn cross_attention(g: &mut Graph, z: Var, c: Var, w: &AttnWeights) -> Result<AttnOutput> {
    let (zs, cs) = (g.shape(z).to_vec(), g.shape(c).to_vec());
    let wq = g.shape(g.param(w.q.weight)).to_vec();
    let wk = g.shape(g.param(w.k.weight)).to_vec();
    let wv = g.shape(g.param(w.v.weight)).to_vec();
    if zs.len() != 2 || cs.len() != 2 || zs[1] != wq[0] || cs[1] != wk[0] || cs[1] != wv[0] {
        return Err(shape_err!(
            "cross_attention: z {zs:?}, c {cs:?}, W_q {wq:?}, W_k {wk:?}, W_v {wv:?}"
        ));
    }
    if wq[1] != wk[1] || wq[1] == 0 {
        return Err(shape_err!("query width {} != key width {}", wq[1], wk[1]));
    }
    let d = wq[1] as f64;
    let q = w.q.forward(g, z);
    let k = w.k.forward(g, c);
    let v = w.v.forward(g, c);
    let kt = g.transpose(k);
    let scores = g.matmul(q, kt);
    let scaled = g.scale(scores, 1.0 / d.sqrt());
    let attn = g.softmax_rows(scaled);
    let out = g.matmul(attn, v);
    Ok(AttnOutput { out, scores })
}

/// Column `tex_index` of a score matrix, reshaped to `[1, h, w]`.
pub fn search_text_slice(
    g: &mut Graph,
    scores: Var,
    tex_index: usize,
    dims: (usize, usize),
) -> Result<Var> {
    let s = g.shape(scores).to_vec();
    if s.len() != 2 {
        return Err(shape_err!("score matrix must be 2-D, got {s:?}"));
    }
    if tex_index >= s[1] {
        return Err(param_err!("token index {tex_index} outside 0..{}", s[1]));
    }
    if dims.0 * dims.1 != s[0] {
        return Err(shape_err!(
            "{} image tokens cannot form a {}x{} map",
            s[0],
            dims.0,
            dims.1
        ));
    }
    let col = g.select_column(scores, tex_index);
    Ok(g.reshape(col, &[1, dims.0, dims.1]))
}

/// Resizes each `[1, h_m, w_m]` map bilinearly to `target`, concatenates the
/// `M` maps as channels and applies the `[d_a, M]` projection `w_a`.
pub fn aggregate_attention(
    g: &mut Graph,
    maps: &[Var],
    target: (usize, usize),
    w_a: Var,
) -> Result<Var> {
    if maps.is_empty() {
        return Err(param_err!("aggregate_attention needs at least one map"));
    }
    if target.0 == 0 || target.1 == 0 {
        return Err(param_err!("empty aggregation target {target:?}"));
    }
    let ws = g.shape(w_a).to_vec();
    if ws.len() != 2 || ws[1] != maps.len() {
        return Err(shape_err!(
            "projection {ws:?} does not take {} channels",
            maps.len()
        ));
    }
    let mut resized = Vec::with_capacity(maps.len());
    for &m in maps {
        let s = g.shape(m).to_vec();
        if s.len() != 3 || s[0] != 1 || s[1] == 0 || s[2] == 0 {
            return Err(shape_err!("attention map must be [1, h, w], got {s:?}"));
        }
        resized.push(if (s[1], s[2]) == target {
            m
        } else {
            g.resize_bilinear(m, target.0, target.1)
        });
    }
    let stacked = g.concat(&resized);
    let w4 = g.reshape(w_a, &[ws[0], ws[1], 1, 1]);
    Ok(g.conv2d(stacked, w4, None, 1, 0))
}

/// Attention state collected during one denoising pass.
#[derive(Debug, Clone)]
pub struct AttnStack {
    /// Raw score matrices `q k^T`, one per cross-attention layer.
    pub per_layer: Vec<Var>,
    /// Spatial size of each layer's image tokens.
    pub layer_dims: Vec<(usize, usize)>,
    /// Keyword slice of each layer as a `[1, h_m, w_m]` map.
    pub tex_maps: Vec<Var>,
    /// Projected aggregate `[d_a, h, w]`.
    pub aggregated: Option<Var>,
}

impl AttnStack {
    pub fn new() -> Self {
        Self {
            per_layer: Vec::new(),
            layer_dims: Vec::new(),
            tex_maps: Vec::new(),
            aggregated: None,
        }
    }

    pub fn len(&self) -> usize {
        self.per_layer.len()
    }

    pub fn is_empty(&self) -> bool {
        self.per_layer.is_empty()
    }
}

impl Default for AttnStack {
    fn default() -> Self {
        Self::new()
    }
}

/// Cross-attention layer used inside the U-Net: group norm, projections with
/// low-rank adapters on `W_q`, `W_k`, `W_v`, an output projection, and a
/// residual connection.
#[derive(Debug, Clone)]
pub struct CrossAttnLayer {
    norm: GroupNorm,
    pub weights: AttnWeights,
    out: Linear,
}

impl CrossAttnLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        text_dim: usize,
        d_model: usize,
        lora: Option<&LoraConfig>,
        rng: &mut R,
    ) -> Result<Self> {
        let norm = GroupNorm::new(store, &format!("{name}.norm"), channels);
        let mut q = Linear::new(store, &format!("{name}.to_q"), channels, d_model, false, rng);
        let mut k = Linear::new(store, &format!("{name}.to_k"), text_dim, d_model, false, rng);
        let mut v = Linear::new(store, &format!("{name}.to_v"), text_dim, d_model, false, rng);
        if let Some(cfg) = lora {
            q = q.with_lora(store, &format!("{name}.to_q"), cfg, rng)?;
            k = k.with_lora(store, &format!("{name}.to_k"), cfg, rng)?;
            v = v.with_lora(store, &format!("{name}.to_v"), cfg, rng)?;
        }
        let out = Linear::new(store, &format!("{name}.to_out"), d_model, channels, true, rng);
        let w = store.value_mut(out.weight);
        *w = w.map(|x| 0.3 * x);
        Ok(Self {
            norm,
            weights: AttnWeights { q, k, v },
            out,
        })
    }

    /// Returns the updated `[C, H, W]` map and the raw score matrix.
    pub fn forward(&self, g: &mut Graph, x: Var, c: Var) -> Result<(Var, Var)> {
        let (delta, scores) = self.residual(g, x, c)?;
        Ok((g.add(x, delta), scores))
    }

    /// The attention contribution alone, before it is added back onto `x`.
    pub fn residual(&self, g: &mut Graph, x: Var, c: Var) -> Result<(Var, Var)> {
        let (ch, h, w) = g.value(x).chw()?;
        let n = self.norm.forward(g, x);
        let flat = g.reshape(n, &[ch, h * w]);
        let tokens = g.transpose(flat);
        let AttnOutput { out, scores } = cross_attention(g, tokens, c, &self.weights)?;
        let proj = self.out.forward(g, out);
        let back = g.transpose(proj);
        Ok((g.reshape(back, &[ch, h, w]), scores))
    }
}

/// Attention-map projection `W_a` from `M` layers to `d_a` channels.
#[derive(Debug, Clone)]
pub struct AttnAggregator {
    pub w_a: ParamId,
}

impl AttnAggregator {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        layers: usize,
        out_channels: usize,
        rng: &mut R,
    ) -> Self {
        let w_a = store.add(
            "attn_agg.w_a",
            Tensor::randn(&[out_channels, layers], 1.0 / (layers as f64).sqrt(), rng),
        );
        Self { w_a }
    }

    pub fn forward(&self, g: &mut Graph, maps: &[Var], target: (usize, usize)) -> Result<Var> {
        let w = g.param(self.w_a);
        aggregate_attention(g, maps, target, w)
    }
}

/// Black-red-yellow-white ramp; channel sum is strictly increasing in `v`.
fn heat_color(v: f64) -> [f64; 3] {
    [
        (3.0 * v).clamp(0.0, 1.0),
        (3.0 * v - 1.0).clamp(0.0, 1.0),
        (3.0 * v - 2.0).clamp(0.0, 1.0),
    ]
}

/// Min-max normalises `map`, colours it, resizes it to the underlay and
/// blends 50/50. A constant map renders as the mid colour everywhere.
pub fn export_heatmap(map: &Tensor, underlay: &Image) -> Result<Image> {
    let (h, w) = match map.shape() {
        [h, w] | [1, h, w] => (*h, *w),
        s => return Err(shape_err!("heatmap source must be [h, w] or [1, h, w], got {s:?}")),
    };
    if !map.is_finite() {
        return Err(Error::Domain("heatmap source has non-finite values".into()));
    }
    let lo = map.data().iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = map.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let norm: Vec<f64> = if hi - lo > 0.0 {
        map.data().iter().map(|v| (v - lo) / (hi - lo)).collect()
    } else {
        vec![0.5; map.len()]
    };
    let small = Image::new(1, h, w, norm)?;
    let big = if (h, w) == (underlay.height(), underlay.width()) {
        small
    } else {
        resize(&small, underlay.height(), underlay.width(), Filter::Bilinear)
    };
    let (uh, uw) = (underlay.height(), underlay.width());
    let mut out = Image::filled(3, uh, uw, 0.0);
    for y in 0..uh {
        for x in 0..uw {
            let color = heat_color(big.get(0, y, x).clamp(0.0, 1.0));
            for (c, cv) in color.iter().enumerate() {
                let base = underlay.get(c.min(underlay.channels() - 1), y, x);
                out.set(c, y, x, 0.5 * base + 0.5 * cv);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Serialize)]
struct HeatmapIndexEntry {
    layer: usize,
    height: usize,
    width: usize,
    file: String,
}

/// Writes one heatmap PNG per layer map plus `aggregate.png` (channel mean
/// of the projected stack) and an `index.json` listing them.
pub fn dump_heatmaps(
    dir: &Path,
    tex_maps: &[Tensor],
    aggregate: Option<&Tensor>,
    underlay: &Image,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut index = Vec::new();
    for (i, m) in tex_maps.iter().enumerate() {
        let file = format!("layer_{i:02}.png");
        export_heatmap(m, underlay)?.save_png(&dir.join(&file))?;
        let s = m.shape();
        index.push(HeatmapIndexEntry {
            layer: i,
            height: s[s.len() - 2],
            width: s[s.len() - 1],
            file,
        });
    }
    if let Some(a) = aggregate {
        let (c, h, w) = a.chw()?;
        let mut mean = vec![0.0; h * w];
        for plane in a.data().chunks(h * w) {
            for (m, v) in mean.iter_mut().zip(plane) {
                *m += v / c as f64;
            }
        }
        let t = Tensor::new(&[h, w], mean)?;
        export_heatmap(&t, underlay)?.save_png(&dir.join("aggregate.png"))?;
    }
    let json = serde_json::to_string_pretty(&index)?;
    let p = dir.join("index.json");
    std::fs::write(&p, json).map_err(|e| Error::io(p, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn weights(store: &mut ParamStore, d_img: usize, d_txt: usize, d: usize) -> AttnWeights {
        let rng = &mut ChaCha8Rng::seed_from_u64(5);
        AttnWeights {
            q: Linear::new(store, "q", d_img, d, false, rng),
            k: Linear::new(store, "k", d_txt, d, false, rng),
            v: Linear::new(store, "v", d_txt, d, false, rng),
        }
    }

    #[test]
    fn zero_scores_average_the_values() {
        let mut store = ParamStore::new();
        let w = weights(&mut store, 3, 4, 5);
        *store.value_mut(w.q.weight) = Tensor::zeros(&[3, 5]);
        let mut g = Graph::new();
        g.bind(&store);
        let rng = &mut ChaCha8Rng::seed_from_u64(6);
        let z = g.constant(Tensor::randn(&[6, 3], 1.0, rng));
        let c = g.constant(Tensor::randn(&[4, 4], 1.0, rng));
        let r = cross_attention(&mut g, z, c, &w).unwrap();
        let v = w.v.forward(&mut g, c);
        let vv = g.value(v).data().to_vec();
        let mean: Vec<f64> = (0..5).map(|j| (0..4).map(|i| vv[i * 5 + j]).sum::<f64>() / 4.0).collect();
        for row in g.value(r.out).data().chunks(5) {
            for (a, b) in row.iter().zip(&mean) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_token_broadcasts_value() {
        let mut store = ParamStore::new();
        let w = weights(&mut store, 3, 4, 5);
        let mut g = Graph::new();
        g.bind(&store);
        let rng = &mut ChaCha8Rng::seed_from_u64(7);
        let z = g.constant(Tensor::randn(&[9, 3], 3.0, rng));
        let c = g.constant(Tensor::randn(&[1, 4], 1.0, rng));
        let r = cross_attention(&mut g, z, c, &w).unwrap();
        let v = w.v.forward(&mut g, c);
        let v = g.value(v).data().to_vec();
        for row in g.value(r.out).data().chunks(5) {
            for (a, b) in row.iter().zip(&v) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mismatched_widths_are_shape_errors() {
        let mut store = ParamStore::new();
        let w = weights(&mut store, 3, 4, 5);
        let mut g = Graph::new();
        g.bind(&store);
        let z = g.constant(Tensor::zeros(&[6, 2]));
        let c = g.constant(Tensor::zeros(&[4, 4]));
        assert!(matches!(cross_attention(&mut g, z, c, &w), Err(Error::Shape(_))));
    }

    #[test]
    fn slice_extracts_constant_column() {
        let mut g = Graph::new();
        let mut data = vec![0.0; 16 * 4];
        for r in 0..16 {
            data[r * 4 + 2] = 0.7;
            data[r * 4] = r as f64;
        }
        let a = g.constant(Tensor::new(&[16, 4], data).unwrap());
        let m = search_text_slice(&mut g, a, 2, (4, 4)).unwrap();
        assert_eq!(g.shape(m), &[1, 4, 4]);
        assert!(g.value(m).data().iter().all(|&v| v == 0.7));
        assert!(search_text_slice(&mut g, a, 4, (4, 4)).is_err());
        assert!(search_text_slice(&mut g, a, 0, (3, 4)).is_err());
    }

    #[test]
    fn aggregation_identity_and_shapes() {
        let mut g = Graph::new();
        let rng = &mut ChaCha8Rng::seed_from_u64(8);
        let m = g.constant(Tensor::randn(&[1, 16, 16], 1.0, rng));
        let w = g.constant(Tensor::ones(&[1, 1]));
        let out = aggregate_attention(&mut g, &[m], (16, 16), w).unwrap();
        assert_eq!(g.value(out).data(), g.value(m).data());

        let maps: Vec<Var> = [4, 8, 8, 16]
            .iter()
            .map(|&s| g.constant(Tensor::randn(&[1, s, s], 1.0, rng)))
            .collect();
        let w = g.constant(Tensor::randn(&[16, 4], 1.0, rng));
        let out = aggregate_attention(&mut g, &maps, (16, 16), w).unwrap();
        assert_eq!(g.shape(out), &[16, 16, 16]);
        assert!(aggregate_attention(&mut g, &[], (16, 16), w).is_err());
    }

    #[test]
    fn constant_maps_stay_constant_under_convex_projection() {
        let mut g = Graph::new();
        let maps: Vec<Var> = [4, 8, 16]
            .iter()
            .map(|&s| g.constant(Tensor::full(&[1, s, s], 0.42)))
            .collect();
        let w = g.constant(Tensor::new(&[2, 3], vec![0.2, 0.3, 0.5, 0.6, 0.1, 0.3]).unwrap());
        let out = aggregate_attention(&mut g, &maps, (16, 16), w).unwrap();
        assert!(g.value(out).data().iter().all(|v| (v - 0.42).abs() < 1e-12));
    }

    #[test]
    fn heatmap_shapes_and_extremes() {
        let under = Image::filled(3, 32, 32, 0.2);
        let flat = export_heatmap(&Tensor::full(&[8, 8], 3.0), &under).unwrap();
        assert_eq!(flat.dims(), (3, 32, 32));
        let first: Vec<f64> = (0..3).map(|c| flat.get(c, 0, 0)).collect();
        for y in 0..32 {
            for x in 0..32 {
                for c in 0..3 {
                    assert_eq!(flat.get(c, y, x), first[c]);
                }
            }
        }

        let mut hot = Tensor::zeros(&[32, 32]);
        hot.data_mut()[5 * 32 + 9] = 1.0;
        let img = export_heatmap(&hot, &under).unwrap();
        let lum = img.luma();
        let argmax = lum
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert_eq!(argmax, 5 * 32 + 9);
    }

    #[test]
    fn heatmap_rejects_non_finite() {
        let under = Image::filled(3, 4, 4, 0.0);
        let mut t = Tensor::zeros(&[2, 2]);
        t.data_mut()[0] = f64::NAN;
        assert!(export_heatmap(&t, &under).is_err());
    }
}
