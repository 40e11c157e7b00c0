//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! [`Graph::backward`] walks the tape in reverse and accumulates gradients
//! into every node that transitively depends on a trainable leaf.
//!
//! Spatial tensors are channel-first `[C, H, W]` with no batch axis; matrices
//! are `[rows, cols]`. Operations assert their shape preconditions and panic
//! on violation; the model-level APIs validate user input before it gets here.

use crate::params::{ParamId, ParamStore};
use crate::tensor::{gemm, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    MulScalar(Var, Var),
    AddChannelBias(Var, Var),
    AddRowBias(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Silu(Var),
    Sigmoid(Var),
    Log(Var),
    Pow(Var, f64),
    Clamp(Var, f64, f64),
    Abs(Var),
    MatMul(Var, Var),
    Transpose(Var),
    SoftmaxRows(Var),
    Reshape(Var),
    SliceChannels(Var, usize),
    Concat(Vec<Var>),
    SelectColumn(Var, usize),
    UpsampleNearest2(Var),
    ResizeBilinear(Var),
    AvgPool2(Var),
    Stencil3(Var, Vec<[f64; 9]>),
    Sum(Var),
    Mean(Var),
    GatherRows(Var, Vec<usize>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<Option<Var>>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Source taps for half-pixel-centred bilinear resampling along one axis.
fn bilinear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let s = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (s.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Vec<f64> {
    let l = ho * wo;
    let mut cols = vec![0.0; c * k * k * l];
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((ci * k + ky) * k + kx) * l..][..l];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * w..][..w];
                    let dst = &mut row[oy * wo..][..wo];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            *d = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    cols: &[f64],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Vec<f64> {
    let l = ho * wo;
    let mut x = vec![0.0; c * h * w];
    for ci in 0..c {
        let plane = &mut x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((ci * k + ky) * k + kx) * l..][..l];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..][..w];
                    let src = &row[oy * wo..][..wo];
                    for (ox, s) in src.iter().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += s;
                        }
                    }
                }
            }
        }
    }
    x
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        let t = self.value(v);
        assert_eq!(t.len(), 1, "scalar() on tensor of shape {:?}", t.shape());
        t.data()[0]
    }

    /// A leaf that gradients flow into.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// A leaf that is treated as constant by [`Graph::backward`].
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Copies `v` into a new constant leaf, cutting gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    /// Places every parameter of `store` on the tape as a leaf. Trainable
    /// parameters receive gradients; frozen ones are constants.
    pub fn bind(&mut self, store: &ParamStore) {
        self.params = store
            .iter()
            .map(|(_, p)| {
                let t = p.value.clone();
                Some(if p.trainable {
                    self.input(t)
                } else {
                    self.constant(t)
                })
            })
            .collect();
    }

    pub fn param(&self, id: ParamId) -> Var {
        self.params
            .get(id.index())
            .copied()
            .flatten()
            .expect("parameter used before ParamStore was bound to the graph")
    }

    fn unary(&mut self, a: Var, value: Tensor, op: Op) -> Var {
        let ng = self.needs(a);
        self.push(value, op, ng)
    }

    fn binary_same(&self, a: Var, b: Var, what: &str) {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "{what}: operand shapes differ"
        );
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary_same(a, b, "add");
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(va.shape(), data).unwrap();
        let ng = self.needs(a) || self.needs(b);
        self.push(t, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary_same(a, b, "sub");
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x - y).collect();
        let t = Tensor::new(va.shape(), data).unwrap();
        let ng = self.needs(a) || self.needs(b);
        self.push(t, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary_same(a, b, "mul");
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(va.shape(), data).unwrap();
        let ng = self.needs(a) || self.needs(b);
        self.push(t, Op::Mul(a, b), ng)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary_same(a, b, "div");
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x / y).collect();
        let t = Tensor::new(va.shape(), data).unwrap();
        let ng = self.needs(a) || self.needs(b);
        self.push(t, Op::Div(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a).map(|v| v * c);
        self.unary(a, t, Op::Scale(a, c))
    }

    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a).map(|v| v + c);
        self.unary(a, t, Op::Offset(a))
    }

    /// `1 - a`.
    pub fn one_minus(&mut self, a: Var) -> Var {
        let n = self.scale(a, -1.0);
        self.offset(n, 1.0)
    }

    /// Multiplies every element of `x` by the one-element tensor `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Var {
        assert_eq!(self.value(s).len(), 1, "mul_scalar: s must have one element");
        let k = self.value(s).data()[0];
        let t = self.value(x).map(|v| v * k);
        let ng = self.needs(x) || self.needs(s);
        self.push(t, Op::MulScalar(x, s), ng)
    }

    /// Adds `b[c]` to every element of channel `c` of a `[C, ...]` tensor.
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Var {
        let vx = self.value(x);
        let vb = self.value(b);
        let c = vx.shape()[0];
        assert_eq!(vb.len(), c, "add_channel_bias: bias length mismatch");
        let per = vx.len() / c;
        let mut data = vx.data().to_vec();
        for (ch, bias) in vb.data().iter().enumerate() {
            for v in &mut data[ch * per..(ch + 1) * per] {
                *v += bias;
            }
        }
        let t = Tensor::new(vx.shape(), data).unwrap();
        let ng = self.needs(x) || self.needs(b);
        self.push(t, Op::AddChannelBias(x, b), ng)
    }

    /// Adds `b` to every row of an `[N, C]` matrix.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Var {
        let vx = self.value(x);
        let vb = self.value(b);
        let c = *vx.shape().last().unwrap();
        assert_eq!(vb.len(), c, "add_row_bias: bias length mismatch");
        let mut data = vx.data().to_vec();
        for row in data.chunks_mut(c) {
            for (v, bias) in row.iter_mut().zip(vb.data()) {
                *v += bias;
            }
        }
        let t = Tensor::new(vx.shape(), data).unwrap();
        let ng = self.needs(x) || self.needs(b);
        self.push(t, Op::AddRowBias(x, b), ng)
    }

    /// 2-D convolution of `x: [C, H, W]` with `w: [O, C, k, k]`, zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let (c, h, wd) = self.value(x).chw().expect("conv2d input");
        let ws = self.shape(w).to_vec();
        assert!(
            ws.len() == 4 && ws[1] == c && ws[2] == ws[3],
            "conv2d: weight {:?} incompatible with input channels {c}",
            ws
        );
        let (o, k) = (ws[0], ws[2]);
        assert!(stride >= 1 && h + 2 * pad >= k && wd + 2 * pad >= k);
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let l = ho * wo;
        let mut out = vec![0.0; o * l];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            if k == 1 && stride == 1 && pad == 0 {
                gemm(o, c, l, 1.0, wv, false, xv, false, 0.0, &mut out);
            } else {
                let cols = im2col(xv, c, h, wd, k, stride, pad, ho, wo);
                gemm(o, c * k * k, l, 1.0, wv, false, &cols, false, 0.0, &mut out);
            }
        }
        if let Some(b) = b {
            let bv = self.value(b).data();
            assert_eq!(bv.len(), o, "conv2d: bias length mismatch");
            for (row, bias) in out.chunks_mut(l).zip(bv) {
                for v in row {
                    *v += bias;
                }
            }
        }
        let ng = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        let t = Tensor::new(&[o, ho, wo], out).unwrap();
        self.push(
            t,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
            ng,
        )
    }

    /// Group normalisation over `[C, H, W]` with per-channel affine.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: f64) -> Var {
        let (c, h, w) = self.value(x).chw().expect("group_norm input");
        assert!(groups >= 1 && c % groups == 0, "group_norm: {c} channels, {groups} groups");
        assert_eq!(self.value(gamma).len(), c);
        assert_eq!(self.value(beta).len(), c);
        let per = (c / groups) * h * w;
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; groups];
        for g in 0..groups {
            let seg = &xv[g * per..(g + 1) * per];
            let mean = seg.iter().sum::<f64>() / per as f64;
            let var = seg.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / per as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd[g] = r;
            for (o, v) in xhat[g * per..(g + 1) * per].iter_mut().zip(seg) {
                *o = (v - mean) * r;
            }
        }
        let hw = h * w;
        let mut out = vec![0.0; xv.len()];
        for ch in 0..c {
            for i in 0..hw {
                out[ch * hw + i] = xhat[ch * hw + i] * gv[ch] + bv[ch];
            }
        }
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let t = Tensor::new(&[c, h, w], out).unwrap();
        self.push(
            t,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                rstd,
            },
            ng,
        )
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|v| v * sigmoid(v));
        self.unary(a, t, Op::Silu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.value(a).map(sigmoid);
        self.unary(a, t, Op::Sigmoid(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::ln);
        self.unary(a, t, Op::Log(a))
    }

    pub fn pow(&mut self, a: Var, p: f64) -> Var {
        let t = self.value(a).map(|v| v.powf(p));
        self.unary(a, t, Op::Pow(a, p))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.mul(a, a)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let t = self.value(a).map(|v| v.clamp(lo, hi));
        self.unary(a, t, Op::Clamp(a, lo, hi))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::abs);
        self.unary(a, t, Op::Abs(a))
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert!(
            sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0],
            "matmul: {:?} x {:?}",
            sa,
            sb
        );
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            1.0,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            0.0,
            &mut out,
        );
        let ng = self.needs(a) || self.needs(b);
        self.push(Tensor::new(&[m, n], out).unwrap(), Op::MatMul(a, b), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let s = self.shape(a);
        assert_eq!(s.len(), 2, "transpose expects a matrix");
        let (r, c) = (s[0], s[1]);
        let v = self.value(a).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = v[i * c + j];
            }
        }
        self.unary(a, Tensor::new(&[c, r], out).unwrap(), Op::Transpose(a))
    }

    /// Row-wise softmax of an `[N, L]` matrix.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let s = self.shape(a).to_vec();
        assert_eq!(s.len(), 2, "softmax_rows expects a matrix");
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(s[1]) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        self.unary(a, Tensor::new(&s, out).unwrap(), Op::SoftmaxRows(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let t = self.value(a).clone().reshape(shape).expect("reshape");
        self.unary(a, t, Op::Reshape(a))
    }

    /// Channels `start..start + len` along the first axis.
    pub fn slice_channels(&mut self, a: Var, start: usize, len: usize) -> Var {
        let s = self.shape(a).to_vec();
        assert!(start + len <= s[0], "slice_channels out of range");
        let per: usize = s[1..].iter().product();
        let data = self.value(a).data()[start * per..(start + len) * per].to_vec();
        let mut shape = s.clone();
        shape[0] = len;
        self.unary(a, Tensor::new(&shape, data).unwrap(), Op::SliceChannels(a, start))
    }

    /// Concatenation along the first axis.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let tail = self.shape(parts[0])[1..].to_vec();
        let mut data = Vec::new();
        let mut lead = 0;
        for &p in parts {
            let s = self.shape(p);
            assert_eq!(&s[1..], &tail[..], "concat: trailing dims differ");
            lead += s[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(&tail);
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(Tensor::new(&shape, data).unwrap(), Op::Concat(parts.to_vec()), ng)
    }

    /// Column `idx` of an `[N, L]` matrix, as a length-`N` vector.
    pub fn select_column(&mut self, a: Var, idx: usize) -> Var {
        let s = self.shape(a).to_vec();
        assert!(s.len() == 2 && idx < s[1], "select_column out of range");
        let v = self.value(a).data();
        let data = (0..s[0]).map(|r| v[r * s[1] + idx]).collect();
        self.unary(a, Tensor::new(&[s[0]], data).unwrap(), Op::SelectColumn(a, idx))
    }

    pub fn upsample_nearest2(&mut self, a: Var) -> Var {
        let (c, h, w) = self.value(a).chw().expect("upsample input");
        let v = self.value(a).data();
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![0.0; c * oh * ow];
        for ch in 0..c {
            for y in 0..oh {
                for x in 0..ow {
                    out[(ch * oh + y) * ow + x] = v[(ch * h + y / 2) * w + x / 2];
                }
            }
        }
        self.unary(a, Tensor::new(&[c, oh, ow], out).unwrap(), Op::UpsampleNearest2(a))
    }

    /// Bilinear resize of `[C, H, W]` to `[C, oh, ow]` with half-pixel centres.
    pub fn resize_bilinear(&mut self, a: Var, oh: usize, ow: usize) -> Var {
        let (c, h, w) = self.value(a).chw().expect("resize input");
        assert!(oh > 0 && ow > 0 && h > 0 && w > 0);
        let ty = bilinear_taps(h, oh);
        let tx = bilinear_taps(w, ow);
        let v = self.value(a).data();
        let mut out = vec![0.0; c * oh * ow];
        for ch in 0..c {
            let plane = &v[ch * h * w..(ch + 1) * h * w];
            for (y, &(y0, y1, fy)) in ty.iter().enumerate() {
                for (x, &(x0, x1, fx)) in tx.iter().enumerate() {
                    // Lerp form: equal taps reproduce the tap exactly.
                    let (a, b) = (plane[y0 * w + x0], plane[y0 * w + x1]);
                    let top = a + (b - a) * fx;
                    let (a, b) = (plane[y1 * w + x0], plane[y1 * w + x1]);
                    let bot = a + (b - a) * fx;
                    out[(ch * oh + y) * ow + x] = top + (bot - top) * fy;
                }
            }
        }
        self.unary(a, Tensor::new(&[c, oh, ow], out).unwrap(), Op::ResizeBilinear(a))
    }

    /// 2x2 mean pooling; spatial dims must be even.
    pub fn avg_pool2(&mut self, a: Var) -> Var {
        let (c, h, w) = self.value(a).chw().expect("avg_pool2 input");
        assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even dims, got {h}x{w}");
        let v = self.value(a).data();
        let (oh, ow) = (h / 2, w / 2);
        let mut out = vec![0.0; c * oh * ow];
        for ch in 0..c {
            for y in 0..oh {
                for x in 0..ow {
                    let i = (ch * h + 2 * y) * w + 2 * x;
                    out[(ch * oh + y) * ow + x] = 0.25 * (v[i] + v[i + 1] + v[i + w] + v[i + w + 1]);
                }
            }
        }
        self.unary(a, Tensor::new(&[c, oh, ow], out).unwrap(), Op::AvgPool2(a))
    }

    /// Applies each fixed 3x3 kernel (row-major, correlation form) to every
    /// channel with replicate padding. Output is `[C * K, H, W]`, channel-major.
    pub fn stencil3(&mut self, a: Var, kernels: &[[f64; 9]]) -> Var {
        let (c, h, w) = self.value(a).chw().expect("stencil3 input");
        let nk = kernels.len();
        let v = self.value(a).data();
        let mut out = vec![0.0; c * nk * h * w];
        for ch in 0..c {
            let plane = &v[ch * h * w..(ch + 1) * h * w];
            for (ki, ker) in kernels.iter().enumerate() {
                let dst = &mut out[(ch * nk + ki) * h * w..][..h * w];
                for y in 0..h {
                    for x in 0..w {
                        // Positive and negative taps are summed apart so
                        // antisymmetric kernels give exact zeros on flat input.
                        let (mut pos, mut neg) = (0.0, 0.0);
                        for dy in 0..3 {
                            let sy = (y + dy).saturating_sub(1).min(h - 1);
                            for dx in 0..3 {
                                let sx = (x + dx).saturating_sub(1).min(w - 1);
                                let k = ker[dy * 3 + dx];
                                if k >= 0.0 {
                                    pos += k * plane[sy * w + sx];
                                } else {
                                    neg -= k * plane[sy * w + sx];
                                }
                            }
                        }
                        dst[y * w + x] = pos - neg;
                    }
                }
            }
        }
        let t = Tensor::new(&[c * nk, h, w], out).unwrap();
        self.unary(a, t, Op::Stencil3(a, kernels.to_vec()))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let t = Tensor::scalar(self.value(a).sum());
        self.unary(a, t, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let t = Tensor::scalar(v.sum() / v.len() as f64);
        self.unary(a, t, Op::Mean(a))
    }

    /// Rows `ids` of an `[V, E]` table, stacked into `[ids.len(), E]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Var {
        let s = self.shape(table).to_vec();
        assert_eq!(s.len(), 2, "gather_rows expects a matrix");
        let v = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * s[1]);
        for &i in ids {
            assert!(i < s[0], "gather_rows: id {i} out of range");
            data.extend_from_slice(&v[i * s[1]..(i + 1) * s[1]]);
        }
        let t = Tensor::new(&[ids.len(), s[1]], data).unwrap();
        self.unary(table, t, Op::GatherRows(table, ids.to_vec()))
    }

    /// Reverse pass from the scalar node `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(self.shape(loss)));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, t: Tensor) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&t),
            slot @ None => *slot = Some(t),
        }
    }

    fn with_data(&self, like: Var, data: Vec<f64>) -> Tensor {
        Tensor::new(self.shape(like), data).unwrap()
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.needs(*a) {
                    let d = gd.iter().zip(vb).map(|(g, y)| g * y).collect();
                    self.accumulate(grads, *a, self.with_data(*a, d));
                }
                if self.needs(*b) {
                    let d = gd.iter().zip(va).map(|(g, x)| g * x).collect();
                    self.accumulate(grads, *b, self.with_data(*b, d));
                }
            }
            Op::Div(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.needs(*a) {
                    let d = gd.iter().zip(vb).map(|(g, y)| g / y).collect();
                    self.accumulate(grads, *a, self.with_data(*a, d));
                }
                if self.needs(*b) {
                    let d = gd
                        .iter()
                        .zip(va.iter().zip(vb))
                        .map(|(g, (x, y))| -g * x / (y * y))
                        .collect();
                    self.accumulate(grads, *b, self.with_data(*b, d));
                }
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g.map(|v| v * c)),
            Op::Offset(a) | Op::Reshape(a) => {
                let d = gd.to_vec();
                self.accumulate(grads, *a, self.with_data(*a, d));
            }
            Op::MulScalar(x, s) => {
                let k = self.value(*s).data()[0];
                if self.needs(*x) {
                    self.accumulate(grads, *x, g.map(|v| v * k));
                }
                if self.needs(*s) {
                    let d: f64 = gd.iter().zip(self.value(*x).data()).map(|(g, x)| g * x).sum();
                    self.accumulate(grads, *s, self.with_data(*s, vec![d]));
                }
            }
            Op::AddChannelBias(x, b) => {
                self.accumulate(grads, *x, g.clone());
                if self.needs(*b) {
                    let c = self.value(*b).len();
                    let per = gd.len() / c;
                    let d = gd.chunks(per).map(|ch| ch.iter().sum()).collect();
                    self.accumulate(grads, *b, self.with_data(*b, d));
                }
            }
            Op::AddRowBias(x, b) => {
                self.accumulate(grads, *x, g.clone());
                if self.needs(*b) {
                    let c = self.value(*b).len();
                    let mut d = vec![0.0; c];
                    for row in gd.chunks(c) {
                        for (acc, v) in d.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    self.accumulate(grads, *b, self.with_data(*b, d));
                }
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => self.backprop_conv(g, *x, *w, *b, *stride, *pad, grads),
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                rstd,
            } => {
                let (c, h, w) = self.value(*x).chw().unwrap();
                let hw = h * w;
                let gv = self.value(*gamma).data();
                if self.needs(*gamma) || self.needs(*beta) {
                    let mut dg = vec![0.0; c];
                    let mut db = vec![0.0; c];
                    for ch in 0..c {
                        for i in 0..hw {
                            let k = ch * hw + i;
                            dg[ch] += gd[k] * xhat[k];
                            db[ch] += gd[k];
                        }
                    }
                    self.accumulate(grads, *gamma, self.with_data(*gamma, dg));
                    self.accumulate(grads, *beta, self.with_data(*beta, db));
                }
                if self.needs(*x) {
                    let per = (c / groups) * hw;
                    let mut dx = vec![0.0; c * hw];
                    let dxhat: Vec<f64> = (0..c * hw).map(|k| gd[k] * gv[k / hw]).collect();
                    for gi in 0..*groups {
                        let r = gi * per..(gi + 1) * per;
                        let s1: f64 = dxhat[r.clone()].iter().sum();
                        let s2: f64 = dxhat[r.clone()]
                            .iter()
                            .zip(&xhat[r.clone()])
                            .map(|(a, b)| a * b)
                            .sum();
                        let n = per as f64;
                        for k in r {
                            dx[k] = rstd[gi] / n * (n * dxhat[k] - s1 - xhat[k] * s2);
                        }
                    }
                    self.accumulate(grads, *x, self.with_data(*x, dx));
                }
            }
            Op::Silu(a) => {
                let d = gd
                    .iter()
                    .zip(self.value(*a).data())
                    .map(|(g, &x)| {
                        let s = sigmoid(x);
                        g * s * (1.0 + x * (1.0 - s))
                    })
                    .collect();
                self.accumulate(grads, *a, self.with_data(*a, d));
            }
            Op::Sigmoid(a) => {
                let d = gd
                    .iter()
                    .zip(node.value.data())
                    .map(|(g, y)| g * y * (1.0 - y))
                    .collect();
                self.accumulate(grads, *a, self.with_data(*a, d));
            }
            Op::Log(a) => {
                let d = gd.iter().zip(self.value(*a).data()).map(|(g, x)| g / x).collect();
                self.accumulate(grads, *a, self.with_data(*a, d));
            }
            Op::Pow(a, p) => {
                let d = gd
                    .iter()
                    .zip(self.value(*a).data())
                    .map(|(g, x)| {
                        if *p == 1.0 {
                            *g
                        } else {
                            g * p * x.powf(p - 1.0)
                        }
                    })
                    .collect();
                self.accumulate(grads, *a, self.with_data(*a, d));
            }
            Op::Clamp(a, lo, hi) => {
                let d = gd
                    .iter()
                    .zip(self.value(*a).data())
                    .map(|(g, x)| if x < lo || x > hi { 0.0 } else { *g })
                    .collect();
                self.accumulate(grads, *a, self.with_data(*a, d));
            }
            Op::Abs(a) => {
                let d = gd
                    .iter()
                    .zip(self.value(*a).data())
                    .map(|(g, x)| if *x > 0.0 { *g } else if *x < 0.0 { -g } else { 0.0 })
                    .collect();
                self.accumulate(grads, *a, self.with_data(*a, d));
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.needs(*a) {
                    let mut d = vec![0.0; m * k];
                    gemm(m, n, k, 1.0, gd, false, self.value(*b).data(), true, 0.0, &mut d);
                    self.accumulate(grads, *a, self.with_data(*a, d));
                }
                if self.needs(*b) {
                    let mut d = vec![0.0; k * n];
                    gemm(k, m, n, 1.0, self.value(*a).data(), true, gd, false, 0.0, &mut d);
                    self.accumulate(grads, *b, self.with_data(*b, d));
                }
            }
            Op::Transpose(a) => {
                let s = self.shape(*a);
                let (r, c) = (s[0], s[1]);
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        d[i * c + j] = gd[j * r + i];
                    }
                }
                self.accumulate(grads, *a, self.with_data(*a, d));
            }
            Op::SoftmaxRows(a) => {
                let l = self.shape(*a)[1];
                let y = node.value.data();
                let mut d = vec![0.0; y.len()];
                for ((dr, yr), gr) in d.chunks_mut(l).zip(y.chunks(l)).zip(gd.chunks(l)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((o, yv), gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *o = yv * (gv - dot);
                    }
                }
                self.accumulate(grads, *a, self.with_data(*a, d));
            }
            Op::SliceChannels(a, start) => {
                let s = self.shape(*a);
                let per: usize = s[1..].iter().product();
                let mut d = vec![0.0; self.value(*a).len()];
                d[start * per..start * per + gd.len()].copy_from_slice(gd);
                self.accumulate(grads, *a, self.with_data(*a, d));
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if self.needs(p) {
                        let d = gd[off..off + n].to_vec();
                        self.accumulate(grads, p, self.with_data(p, d));
                    }
                    off += n;
                }
            }
            Op::SelectColumn(a, idx) => {
                let l = self.shape(*a)[1];
                let mut d = vec![0.0; self.value(*a).len()];
                for (r, gv) in gd.iter().enumerate() {
                    d[r * l + idx] = *gv;
                }
                self.accumulate(grads, *a, self.with_data(*a, d));
            }
            Op::UpsampleNearest2(a) => {
                let (c, h, w) = self.value(*a).chw().unwrap();
                let (oh, ow) = (2 * h, 2 * w);
                let mut d = vec![0.0; c * h * w];
                for ch in 0..c {
                    for y in 0..oh {
                        for x in 0..ow {
                            d[(ch * h + y / 2) * w + x / 2] += gd[(ch * oh + y) * ow + x];
                        }
                    }
                }
                self.accumulate(grads, *a, self.with_data(*a, d));
            }
            Op::ResizeBilinear(a) => {
                let (c, h, w) = self.value(*a).chw().unwrap();
                let (_, oh, ow) = node.value.chw().unwrap();
                let ty = bilinear_taps(h, oh);
                let tx = bilinear_taps(w, ow);
                let mut d = vec![0.0; c * h * w];
                for ch in 0..c {
                    let plane = &mut d[ch * h * w..(ch + 1) * h * w];
                    for (y, &(y0, y1, fy)) in ty.iter().enumerate() {
                        for (x, &(x0, x1, fx)) in tx.iter().enumerate() {
                            let gv = gd[(ch * oh + y) * ow + x];
                            plane[y0 * w + x0] += gv * (1.0 - fy) * (1.0 - fx);
                            plane[y0 * w + x1] += gv * (1.0 - fy) * fx;
                            plane[y1 * w + x0] += gv * fy * (1.0 - fx);
                            plane[y1 * w + x1] += gv * fy * fx;
                        }
                    }
                }
                self.accumulate(grads, *a, self.with_data(*a, d));
            }
            Op::AvgPool2(a) => {
                let (c, h, w) = self.value(*a).chw().unwrap();
                let (oh, ow) = (h / 2, w / 2);
                let mut d = vec![0.0; c * h * w];
                for ch in 0..c {
                    for y in 0..oh {
                        for x in 0..ow {
                            let gv = 0.25 * gd[(ch * oh + y) * ow + x];
                            let i = (ch * h + 2 * y) * w + 2 * x;
                            d[i] += gv;
                            d[i + 1] += gv;
                            d[i + w] += gv;
                            d[i + w + 1] += gv;
                        }
                    }
                }
                self.accumulate(grads, *a, self.with_data(*a, d));
            }
            Op::Stencil3(a, kernels) => {
                let (c, h, w) = self.value(*a).chw().unwrap();
                let nk = kernels.len();
                let mut d = vec![0.0; c * h * w];
                for ch in 0..c {
                    let plane = &mut d[ch * h * w..(ch + 1) * h * w];
                    for (ki, ker) in kernels.iter().enumerate() {
                        let src = &gd[(ch * nk + ki) * h * w..][..h * w];
                        for y in 0..h {
                            for x in 0..w {
                                let gv = src[y * w + x];
                                for dy in 0..3 {
                                    let sy = (y + dy).saturating_sub(1).min(h - 1);
                                    for dx in 0..3 {
                                        let sx = (x + dx).saturating_sub(1).min(w - 1);
                                        plane[sy * w + sx] += ker[dy * 3 + dx] * gv;
                                    }
                                }
                            }
                        }
                    }
                }
                self.accumulate(grads, *a, self.with_data(*a, d));
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                self.accumulate(grads, *a, self.with_data(*a, vec![gd[0]; n]));
            }
            Op::Mean(a) => {
                let n = self.value(*a).len();
                self.accumulate(grads, *a, self.with_data(*a, vec![gd[0] / n as f64; n]));
            }
            Op::GatherRows(table, ids) => {
                let e = self.shape(*table)[1];
                let mut d = vec![0.0; self.value(*table).len()];
                for (r, &i) in ids.iter().enumerate() {
                    for j in 0..e {
                        d[i * e + j] += gd[r * e + j];
                    }
                }
                self.accumulate(grads, *table, self.with_data(*table, d));
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_conv(
        &self,
        g: &Tensor,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        grads: &mut [Option<Tensor>],
    ) {
        let (c, h, wd) = self.value(x).chw().unwrap();
        let ws = self.shape(w);
        let (o, k) = (ws[0], ws[2]);
        let (_, ho, wo) = g.chw().unwrap();
        let l = ho * wo;
        let gd = g.data();
        let pointwise = k == 1 && stride == 1 && pad == 0;

        if let Some(b) = b.filter(|&b| self.needs(b)) {
            let d = gd.chunks(l).map(|r| r.iter().sum()).collect();
            self.accumulate(grads, b, self.with_data(b, d));
        }
        let cols_owned;
        let cols: &[f64] = if pointwise {
            self.value(x).data()
        } else if self.needs(w) {
            cols_owned = im2col(self.value(x).data(), c, h, wd, k, stride, pad, ho, wo);
            &cols_owned
        } else {
            &[]
        };
        let ckk = c * k * k;
        if self.needs(w) {
            let mut dw = vec![0.0; o * ckk];
            gemm(o, l, ckk, 1.0, gd, false, cols, true, 0.0, &mut dw);
            self.accumulate(grads, w, self.with_data(w, dw));
        }
        if self.needs(x) {
            let mut dcols = vec![0.0; ckk * l];
            gemm(ckk, o, l, 1.0, self.value(w).data(), true, gd, false, 0.0, &mut dcols);
            let dx = if pointwise {
                dcols
            } else {
                col2im(&dcols, c, h, wd, k, stride, pad, ho, wo)
            };
            self.accumulate(grads, x, self.with_data(x, dx));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central-difference gradient of `f` at `x0`, coordinate by coordinate.
    fn numeric_grad(x0: &Tensor, f: &dyn Fn(&Tensor) -> f64) -> Vec<f64> {
        let h = 1e-6;
        (0..x0.len())
            .map(|i| {
                let mut p = x0.clone();
                p.data_mut()[i] += h;
                let mut m = x0.clone();
                m.data_mut()[i] -= h;
                (f(&p) - f(&m)) / (2.0 * h)
            })
            .collect()
    }

    fn check(x0: Tensor, build: impl Fn(&mut Graph, Var) -> Var) {
        let eval = |t: &Tensor| {
            let mut g = Graph::new();
            let x = g.input(t.clone());
            let y = build(&mut g, x);
            g.scalar(y)
        };
        let mut g = Graph::new();
        let x = g.input(x0.clone());
        let y = build(&mut g, x);
        let grads = g.backward(y);
        let analytic = grads.get(x).unwrap().data().to_vec();
        let numeric = numeric_grad(&x0, &eval);
        let num: f64 = analytic
            .iter()
            .zip(&numeric)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let den = Tensor::new(&[analytic.len()], analytic.clone()).unwrap().norm().max(1e-12);
        assert!(num / den < 1e-6, "rel err {} ({analytic:?} vs {numeric:?})", num / den);
    }

    fn probe(shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|i| ((i as f64 + 1.0) * 0.731).sin()).collect()).unwrap()
    }

    /// Reduces `y` against a fixed non-uniform weight so every output
    /// element contributes a distinct gradient.
    fn weighted_sum(g: &mut Graph, y: Var) -> Var {
        let w = probe(g.shape(y));
        let w = g.constant(w);
        let p = g.mul(y, w);
        g.sum(p)
    }

    #[test]
    fn conv2d_gradients() {
        let wt = probe(&[4, 3, 3, 3]).map(|v| 0.3 * v);
        for (stride, pad) in [(1, 1), (2, 1), (1, 0)] {
            let wt = wt.clone();
            check(probe(&[3, 6, 6]), move |g, x| {
                let w = g.input(wt.clone());
                let y = g.conv2d(x, w, None, stride, pad);
                weighted_sum(g, y)
            });
        }
        let x0 = probe(&[3, 5, 5]);
        check(probe(&[4, 3, 3, 3]), move |g, w| {
            let x = g.constant(x0.clone());
            let b = g.constant(Tensor::full(&[4], 0.2));
            let y = g.conv2d(x, w, Some(b), 2, 1);
            weighted_sum(g, y)
        });
    }

    #[test]
    fn group_norm_gradients() {
        check(probe(&[4, 3, 3]), |g, x| {
            let gamma = g.constant(probe(&[4]));
            let beta = g.constant(probe(&[4]));
            let y = g.group_norm(x, gamma, beta, 2, 1e-5);
            weighted_sum(g, y)
        });
    }

    #[test]
    fn elementwise_and_structural_gradients() {
        check(probe(&[2, 4, 4]), |g, x| {
            let a = g.silu(x);
            let b = g.sigmoid(a);
            let c = g.upsample_nearest2(b);
            let d = g.avg_pool2(c);
            let e = g.resize_bilinear(d, 3, 5);
            let f = g.stencil3(e, &[[1.0, 0.0, -1.0, 2.0, 0.0, -2.0, 1.0, 0.0, -1.0]]);
            let h = g.slice_channels(f, 1, 1);
            let i = g.concat(&[h, f]);
            weighted_sum(g, i)
        });
        check(probe(&[3, 4]).map(|v| v.abs() + 0.5), |g, x| {
            let l = g.log(x);
            let p = g.pow(x, 2.5);
            let s = g.add(l, p);
            let q = g.div(s, x);
            let t = g.transpose(q);
            let sm = g.softmax_rows(t);
            let col = g.select_column(sm, 2);
            let m = g.mean(col);
            let tot = g.sum(sm);
            let w = weighted_sum(g, sm);
            let a = g.add(m, w);
            g.add(a, tot)
        });
    }

    #[test]
    fn matmul_and_gather_gradients() {
        let b0 = probe(&[4, 3]);
        check(probe(&[5, 4]), move |g, t| {
            let rows = g.gather_rows(t, &[1, 3, 1]);
            let b = g.constant(b0.clone());
            let y = g.matmul(rows, b);
            let bias = g.constant(probe(&[3]));
            let y = g.add_row_bias(y, bias);
            weighted_sum(g, y)
        });
    }

    #[test]
    fn mul_scalar_gradient_reaches_scale() {
        let x0 = probe(&[2, 2, 2]);
        check(Tensor::scalar(0.3), move |g, s| {
            let x = g.constant(x0.clone());
            let y = g.mul_scalar(x, s);
            weighted_sum(g, y)
        });
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::ones(&[3]));
        let x = g.input(Tensor::ones(&[3]));
        let y = g.mul(c, x);
        let s = g.sum(y);
        let grads = g.backward(s);
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }
}
