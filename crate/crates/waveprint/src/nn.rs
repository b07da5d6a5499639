//! Classifier for spectral fingerprints: a small multi-scale residual
//! convolutional network with a from-scratch reverse-mode autodiff
//! engine, Adam training, and binary checkpoints.
//!
//! Determinism contract: all computation is f64, but parameters are
//! rounded to the nearest f32-representable value after initialization
//! and after every optimizer step, so a checkpoint (stored as f32)
//! reloads bit-exactly. Gradients accumulate in fixed node order on a
//! single thread; identical seeds and data give identical results.

use std::fs;
use std::io::{self, Read};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsp::LfccMatrix;
use crate::eval::{metrics, ConfusionMatrix};
use crate::util;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("bad configuration: {0}")]
    BadConfig(String),
    #[error("training diverged (non-finite loss) at epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
}

/// Dense value holder shaped channels x height x width. Vectors use
/// h = w = 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self { c, h, w, data: vec![0.0; c * h * w] }
    }

    pub fn from_vec(c: usize, h: usize, w: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), c * h * w);
        Self { c, h, w, data }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        let c = data.len();
        Self { c, h: 1, w: 1, data }
    }

    fn zeros_like(other: &Self) -> Self {
        Self::zeros(other.c, other.h, other.w)
    }

    #[inline]
    pub fn channel(&self, c: usize) -> &[f64] {
        &self.data[c * self.h * self.w..(c + 1) * self.h * self.w]
    }

    #[inline]
    fn row(&self, c: usize, y: usize) -> &[f64] {
        let base = (c * self.h + y) * self.w;
        &self.data[base..base + self.w]
    }

}

/// Converts a feature matrix to a 1 x frames x coeffs network input.
pub fn lfcc_tensor(m: &LfccMatrix) -> Tensor {
    Tensor::from_vec(1, crate::dsp::N_FRAMES, crate::dsp::N_COEFFS, m.to_f64())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

/// Flat parameter storage with named, shaped entries. The optimizer
/// sees one contiguous slice; the graph addresses entries by id.
#[derive(Debug, Clone)]
pub struct ParamStore {
    names: Vec<String>,
    dims: Vec<Vec<usize>>,
    offsets: Vec<usize>,
    data: Vec<f64>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self { names: Vec::new(), dims: Vec::new(), offsets: Vec::new(), data: Vec::new() }
    }

    pub fn add(&mut self, name: &str, dims: &[usize], values: Vec<f64>) -> ParamId {
        assert_eq!(values.len(), dims.iter().product::<usize>(), "value count vs dims");
        assert!(!self.names.iter().any(|n| n == name), "duplicate parameter {name}");
        let id = ParamId(self.names.len());
        self.names.push(name.to_string());
        self.dims.push(dims.to_vec());
        self.offsets.push(self.data.len());
        self.data.extend_from_slice(&values);
        id
    }

    pub fn n_entries(&self) -> usize {
        self.names.len()
    }

    pub fn n_values(&self) -> usize {
        self.data.len()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn dims(&self, id: ParamId) -> &[usize] {
        &self.dims[id.0]
    }

    pub fn offset(&self, id: ParamId) -> usize {
        self.offsets[id.0]
    }

    pub fn entry_len(&self, id: ParamId) -> usize {
        self.dims[id.0].iter().product()
    }

    pub fn slice(&self, id: ParamId) -> &[f64] {
        let off = self.offsets[id.0];
        &self.data[off..off + self.entry_len(id)]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn set_data(&mut self, data: Vec<f64>) {
        assert_eq!(data.len(), self.data.len());
        self.data = data;
    }

    /// Rounds every value to the nearest f32-representable f64.
    pub fn round_to_f32(&mut self) {
        for v in &mut self.data {
            *v = *v as f32 as f64;
        }
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Input,
    Conv2d { x: NodeId, w: ParamId, b: ParamId, stride: usize, pad: usize },
    AvgPool3 { x: NodeId },
    Relu { x: NodeId },
    Add { a: NodeId, b: NodeId },
    ConcatC { parts: Vec<NodeId> },
    SliceC { x: NodeId, c0: usize },
    GlobalAvgPool { x: NodeId, rows: usize },
    Linear { x: NodeId, w: ParamId, b: ParamId },
}

/// Output index range [lo, hi) such that o*stride + k_off - pad lands
/// inside [0, len_in).
#[inline]
fn out_range(len_in: usize, len_out: usize, k_off: usize, stride: usize, pad: usize) -> (usize, usize) {
    if k_off > len_in - 1 + pad {
        return (0, 0);
    }
    let lo = if k_off >= pad { 0 } else { (pad - k_off).div_ceil(stride) };
    let hi = ((len_in - 1 + pad - k_off) / stride + 1).min(len_out);
    (lo.min(hi), hi)
}

/// Define-by-run computation tape. Values are computed eagerly as ops
/// are pushed; `backward` walks the tape in reverse, accumulating
/// parameter gradients into a flat buffer aligned with the store.
pub struct Graph {
    ops: Vec<Op>,
    values: Vec<Tensor>,
}

impl Graph {
    pub fn new() -> Self {
        Self { ops: Vec::new(), values: Vec::new() }
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.values[id.0]
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        let id = NodeId(self.ops.len());
        self.ops.push(op);
        self.values.push(value);
        id
    }

    pub fn input(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Input, t)
    }

    pub fn conv2d(&mut self, store: &ParamStore, x: NodeId, w: ParamId, b: ParamId, stride: usize, pad: usize) -> NodeId {
        let xv = &self.values[x.0];
        let wd = store.dims(w);
        assert_eq!(wd.len(), 4, "conv weight must be 4-d");
        let (co_n, ci_n, kh, kw) = (wd[0], wd[1], wd[2], wd[3]);
        assert_eq!(ci_n, xv.c, "conv input channels");
        let wv = store.slice(w);
        let bv = store.slice(b);
        let oh = (xv.h + 2 * pad - kh) / stride + 1;
        let ow = (xv.w + 2 * pad - kw) / stride + 1;
        let mut out = Tensor::zeros(co_n, oh, ow);
        for co in 0..co_n {
            let base = co * oh * ow;
            out.data[base..base + oh * ow].fill(bv[co]);
            for ci in 0..ci_n {
                for ky in 0..kh {
                    let (oy_lo, oy_hi) = out_range(xv.h, oh, ky, stride, pad);
                    for kx in 0..kw {
                        let wgt = wv[((co * ci_n + ci) * kh + ky) * kw + kx];
                        let (ox_lo, ox_hi) = out_range(xv.w, ow, kx, stride, pad);
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        for oy in oy_lo..oy_hi {
                            let iy = oy * stride + ky - pad;
                            let ix_lo = ox_lo * stride + kx - pad;
                            let xrow = xv.row(ci, iy);
                            let obase = (co * oh + oy) * ow;
                            let orow = &mut out.data[obase + ox_lo..obase + ox_hi];
                            if stride == 1 {
                                let xs = &xrow[ix_lo..ix_lo + (ox_hi - ox_lo)];
                                for (o, &xval) in orow.iter_mut().zip(xs) {
                                    *o += wgt * xval;
                                }
                            } else {
                                for (o, &xval) in orow.iter_mut().zip(xrow[ix_lo..].iter().step_by(stride)) {
                                    *o += wgt * xval;
                                }
                            }
                        }
                    }
                }
            }
        }
        self.push(Op::Conv2d { x, w, b, stride, pad }, out)
    }

    /// 3x3 average pooling, stride 2, pad 1; the divisor is always 9
    /// (padding counts as zeros).
    pub fn avgpool3(&mut self, x: NodeId) -> NodeId {
        let xv = &self.values[x.0];
        let (oh, ow) = ((xv.h + 2 - 3) / 2 + 1, (xv.w + 2 - 3) / 2 + 1);
        let mut out = Tensor::zeros(xv.c, oh, ow);
        for c in 0..xv.c {
            for ky in 0..3 {
                let (oy_lo, oy_hi) = out_range(xv.h, oh, ky, 2, 1);
                for kx in 0..3 {
                    let (ox_lo, ox_hi) = out_range(xv.w, ow, kx, 2, 1);
                    for oy in oy_lo..oy_hi {
                        let iy = oy * 2 + ky - 1;
                        let xrow = xv.row(c, iy);
                        let obase = (c * oh + oy) * ow;
                        for ox in ox_lo..ox_hi {
                            out.data[obase + ox] += xrow[ox * 2 + kx - 1] / 9.0;
                        }
                    }
                }
            }
        }
        self.push(Op::AvgPool3 { x }, out)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let xv = &self.values[x.0];
        let mut out = xv.clone();
        for v in &mut out.data {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        self.push(Op::Relu { x }, out)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (&self.values[a.0], &self.values[b.0]);
        assert_eq!((av.c, av.h, av.w), (bv.c, bv.h, bv.w), "add shape mismatch");
        let mut out = av.clone();
        for (o, &v) in out.data.iter_mut().zip(&bv.data) {
            *o += v;
        }
        self.push(Op::Add { a, b }, out)
    }

    pub fn concat_c(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let (h, w) = {
            let first = &self.values[parts[0].0];
            (first.h, first.w)
        };
        let c_total: usize = parts.iter().map(|p| self.values[p.0].c).sum();
        let mut out = Tensor::zeros(c_total, h, w);
        let mut at = 0usize;
        for p in parts {
            let pv = &self.values[p.0];
            assert_eq!((pv.h, pv.w), (h, w), "concat spatial mismatch");
            out.data[at..at + pv.data.len()].copy_from_slice(&pv.data);
            at += pv.data.len();
        }
        self.push(Op::ConcatC { parts: parts.to_vec() }, out)
    }

    pub fn slice_c(&mut self, x: NodeId, c0: usize, c1: usize) -> NodeId {
        let xv = &self.values[x.0];
        assert!(c0 < c1 && c1 <= xv.c, "bad channel slice");
        let plane = xv.h * xv.w;
        let out = Tensor::from_vec(c1 - c0, xv.h, xv.w, xv.data[c0 * plane..c1 * plane].to_vec());
        self.push(Op::SliceC { x, c0 }, out)
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> NodeId {
        let rows = self.values[x.0].h;
        self.time_masked_avg_pool(x, rows)
    }

    /// Per-channel mean over the first `rows` height rows. Rows past
    /// `rows` hold zero-padding descendants and are excluded so the
    /// pooled scale does not depend on how much of the input was pad.
    pub fn time_masked_avg_pool(&mut self, x: NodeId, rows: usize) -> NodeId {
        let xv = &self.values[x.0];
        assert!(rows >= 1 && rows <= xv.h, "bad pooling row count");
        let plane = (rows * xv.w) as f64;
        let data = (0..xv.c)
            .map(|c| xv.channel(c)[..rows * xv.w].iter().sum::<f64>() / plane)
            .collect();
        self.push(Op::GlobalAvgPool { x, rows }, Tensor::vector(data))
    }

    pub fn linear(&mut self, store: &ParamStore, x: NodeId, w: ParamId, b: ParamId) -> NodeId {
        let xv = &self.values[x.0];
        assert_eq!(xv.h * xv.w, 1, "linear input must be a vector");
        let wd = store.dims(w);
        assert_eq!(wd.len(), 2);
        let (n_out, n_in) = (wd[0], wd[1]);
        assert_eq!(n_in, xv.c, "linear input size");
        let wv = store.slice(w);
        let bv = store.slice(b);
        let data = (0..n_out)
            .map(|o| {
                bv[o] + wv[o * n_in..(o + 1) * n_in].iter().zip(&xv.data).map(|(wi, xi)| wi * xi).sum::<f64>()
            })
            .collect();
        self.push(Op::Linear { x, w, b }, Tensor::vector(data))
    }

    /// Reverse-mode sweep from `out`, seeded with `dout`. Parameter
    /// gradients accumulate into `dstore` (aligned with the store's
    /// flat data); gradients are not propagated into Input leaves.
    pub fn backward(&self, store: &ParamStore, out: NodeId, dout: Tensor, dstore: &mut [f64]) {
        assert_eq!(dstore.len(), store.n_values());
        let n = self.ops.len();
        let mut grads: Vec<Option<Tensor>> = vec![None; n];
        {
            let ov = &self.values[out.0];
            assert_eq!((dout.c, dout.h, dout.w), (ov.c, ov.h, ov.w), "dout shape");
        }
        grads[out.0] = Some(dout);

        for id in (0..=out.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            match &self.ops[id] {
                Op::Input => {}
                Op::Conv2d { x, w, b, stride, pad } => {
                    let (stride, pad) = (*stride, *pad);
                    let xv = &self.values[x.0];
                    let wd = store.dims(*w);
                    let (co_n, ci_n, kh, kw) = (wd[0], wd[1], wd[2], wd[3]);
                    let (oh, ow) = (g.h, g.w);
                    let off_b = store.offset(*b);
                    for co in 0..co_n {
                        dstore[off_b + co] += g.channel(co).iter().sum::<f64>();
                    }
                    let off_w = store.offset(*w);
                    let wv = store.slice(*w);
                    let want_dx = !matches!(self.ops[x.0], Op::Input);
                    let mut gx = if want_dx { Some(Tensor::zeros_like(xv)) } else { None };
                    for co in 0..co_n {
                        for ci in 0..ci_n {
                            for ky in 0..kh {
                                let (oy_lo, oy_hi) = out_range(xv.h, oh, ky, stride, pad);
                                for kx in 0..kw {
                                    let widx = ((co * ci_n + ci) * kh + ky) * kw + kx;
                                    let wgt = wv[widx];
                                    let (ox_lo, ox_hi) = out_range(xv.w, ow, kx, stride, pad);
                                    if ox_lo >= ox_hi {
                                        continue;
                                    }
                                    let mut dw = 0.0;
                                    for oy in oy_lo..oy_hi {
                                        let iy = oy * stride + ky - pad;
                                        let ix_lo = ox_lo * stride + kx - pad;
                                        let grow = &g.row(co, oy)[ox_lo..ox_hi];
                                        let xrow = xv.row(ci, iy);
                                        if let Some(gx) = gx.as_mut() {
                                            let gxbase = (ci * xv.h + iy) * xv.w;
                                            if stride == 1 {
                                                let xs = &xrow[ix_lo..ix_lo + grow.len()];
                                                let gxs = &mut gx.data[gxbase + ix_lo..gxbase + ix_lo + grow.len()];
                                                for ((&go, &xval), gxv) in grow.iter().zip(xs).zip(gxs) {
                                                    dw += go * xval;
                                                    *gxv += wgt * go;
                                                }
                                            } else {
                                                for (k, &go) in grow.iter().enumerate() {
                                                    let ix = ix_lo + k * stride;
                                                    dw += go * xrow[ix];
                                                    gx.data[gxbase + ix] += wgt * go;
                                                }
                                            }
                                        } else if stride == 1 {
                                            let xs = &xrow[ix_lo..ix_lo + grow.len()];
                                            for (&go, &xval) in grow.iter().zip(xs) {
                                                dw += go * xval;
                                            }
                                        } else {
                                            for (k, &go) in grow.iter().enumerate() {
                                                dw += go * xrow[ix_lo + k * stride];
                                            }
                                        }
                                    }
                                    dstore[off_w + widx] += dw;
                                }
                            }
                        }
                    }
                    if let Some(gx) = gx {
                        accumulate(&mut grads, *x, gx);
                    }
                }
                Op::AvgPool3 { x } => {
                    let xv = &self.values[x.0];
                    let mut gx = Tensor::zeros_like(xv);
                    let (oh, ow) = (g.h, g.w);
                    for c in 0..xv.c {
                        for ky in 0..3 {
                            let (oy_lo, oy_hi) = out_range(xv.h, oh, ky, 2, 1);
                            for kx in 0..3 {
                                let (ox_lo, ox_hi) = out_range(xv.w, ow, kx, 2, 1);
                                for oy in oy_lo..oy_hi {
                                    let iy = oy * 2 + ky - 1;
                                    let gxbase = (c * xv.h + iy) * xv.w;
                                    let grow = g.row(c, oy);
                                    for ox in ox_lo..ox_hi {
                                        gx.data[gxbase + ox * 2 + kx - 1] += grow[ox] / 9.0;
                                    }
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::Relu { x } => {
                    let xv = &self.values[x.0];
                    let mut gx = Tensor::zeros_like(xv);
                    for ((go, &xval), gi) in gx.data.iter_mut().zip(&xv.data).zip(&g.data) {
                        if xval > 0.0 {
                            *go = *gi;
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::ConcatC { parts } => {
                    let mut at = 0usize;
                    for p in parts {
                        let pv = &self.values[p.0];
                        let len = pv.data.len();
                        let part = Tensor::from_vec(pv.c, pv.h, pv.w, g.data[at..at + len].to_vec());
                        accumulate(&mut grads, *p, part);
                        at += len;
                    }
                }
                Op::SliceC { x, c0 } => {
                    let xv = &self.values[x.0];
                    let mut gx = Tensor::zeros_like(xv);
                    let plane = xv.h * xv.w;
                    let at = c0 * plane;
                    for (go, &gi) in gx.data[at..at + g.data.len()].iter_mut().zip(&g.data) {
                        *go += gi;
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::GlobalAvgPool { x, rows } => {
                    let xv = &self.values[x.0];
                    let plane = (rows * xv.w) as f64;
                    let mut gx = Tensor::zeros_like(xv);
                    for c in 0..xv.c {
                        let gc = g.data[c] / plane;
                        let base = c * xv.h * xv.w;
                        for v in &mut gx.data[base..base + rows * xv.w] {
                            *v += gc;
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::Linear { x, w, b } => {
                    let xv = &self.values[x.0];
                    let wd = store.dims(*w);
                    let (n_out, n_in) = (wd[0], wd[1]);
                    let off_w = store.offset(*w);
                    let off_b = store.offset(*b);
                    let wv = store.slice(*w);
                    let mut gx = Tensor::zeros_like(xv);
                    for o in 0..n_out {
                        let go = g.data[o];
                        dstore[off_b + o] += go;
                        let wrow = &wv[o * n_in..(o + 1) * n_in];
                        for i in 0..n_in {
                            dstore[off_w + o * n_in + i] += go * xv.data[i];
                            gx.data[i] += go * wrow[i];
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
            }
        }
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
    match &mut grads[id.0] {
        Some(existing) => {
            for (e, v) in existing.data.iter_mut().zip(&g.data) {
                *e += v;
            }
        }
        slot => *slot = Some(g),
    }
}

/// Softmax followed by cross-entropy against a single label. Returns
/// the loss and the gradient with respect to the logits.
pub fn softmax_cross_entropy(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    assert!(label < logits.len());
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let probs: Vec<f64> = exps.iter().map(|&e| e / sum).collect();
    let loss = -(probs[label].max(1e-12)).ln();
    let mut dlogits = probs;
    dlogits[label] -= 1.0;
    (loss, dlogits)
}

/// Softmax probabilities (numerically shifted).
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Adam optimizer over the flat parameter slice.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(lr: f64, n_params: usize) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: vec![0.0; n_params], v: vec![0.0; n_params] }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grads[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grads[i] * grads[i];
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

fn he_normal(seed: u64, name: &str, fan_in: usize, n: usize) -> Vec<f64> {
    let std = (2.0 / fan_in as f64).sqrt();
    let mut rng = util::rng_for(seed, name);
    (0..n).map(|_| std * util::normal(&mut rng)).collect()
}

/// One multi-scale residual block. The input is reduced with a 1x1
/// convolution, split into `scale` channel groups processed
/// hierarchically with 3x3 convolutions, re-concatenated, and expanded
/// with a zero-initialized 1x1 convolution so the block starts as its
/// skip connection. No activation follows the residual sum.
pub struct Res2Block {
    in_c: usize,
    out_c: usize,
    stride: usize,
    scale: usize,
    reduce_w: ParamId,
    reduce_b: ParamId,
    group_w: Vec<ParamId>,
    group_b: Vec<ParamId>,
    expand_w: ParamId,
    expand_b: ParamId,
    skip: Option<(ParamId, ParamId)>,
}

impl Res2Block {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        seed: u64,
        in_c: usize,
        out_c: usize,
        stride: usize,
        scale: usize,
    ) -> Result<Self, NnError> {
        if out_c % scale != 0 {
            return Err(NnError::BadConfig(format!("out_c {out_c} not divisible by scale {scale}")));
        }
        if stride != 1 && stride != 2 {
            return Err(NnError::BadConfig(format!("unsupported stride {stride}")));
        }
        let gc = out_c / scale;
        let name = |part: &str| format!("{prefix}.{part}");
        let reduce_w = store.add(
            &name("reduce.w"),
            &[out_c, in_c, 1, 1],
            he_normal(seed, &name("reduce.w"), in_c, out_c * in_c),
        );
        let reduce_b = store.add(&name("reduce.b"), &[out_c], vec![0.0; out_c]);
        let mut group_w = Vec::new();
        let mut group_b = Vec::new();
        for gidx in 1..scale {
            let wname = name(&format!("group{gidx}.w"));
            group_w.push(store.add(&wname, &[gc, gc, 3, 3], he_normal(seed, &wname, gc * 9, gc * gc * 9)));
            group_b.push(store.add(&name(&format!("group{gidx}.b")), &[gc], vec![0.0; gc]));
        }
        // Zero init: the block is exactly its skip path at start.
        let expand_w = store.add(&name("expand.w"), &[out_c, out_c, 1, 1], vec![0.0; out_c * out_c]);
        let expand_b = store.add(&name("expand.b"), &[out_c], vec![0.0; out_c]);
        let skip = if stride == 1 && in_c == out_c {
            None
        } else {
            let wname = name("skip.w");
            let w = store.add(&wname, &[out_c, in_c, 1, 1], he_normal(seed, &wname, in_c, out_c * in_c));
            let b = store.add(&name("skip.b"), &[out_c], vec![0.0; out_c]);
            Some((w, b))
        };
        Ok(Self { in_c, out_c, stride, scale, reduce_w, reduce_b, group_w, group_b, expand_w, expand_b, skip })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> NodeId {
        assert_eq!(g.value(x).c, self.in_c, "block input channels");
        let r = g.conv2d(store, x, self.reduce_w, self.reduce_b, 1, 0);
        let r = g.relu(r);
        let gc = self.out_c / self.scale;
        let mut ys: Vec<NodeId> = Vec::with_capacity(self.scale);
        for s in 0..self.scale {
            let xi = g.slice_c(r, s * gc, (s + 1) * gc);
            let y = if s == 0 {
                if self.stride == 1 {
                    xi
                } else {
                    g.avgpool3(xi)
                }
            } else if self.stride == 1 {
                let inp = g.add(xi, ys[s - 1]);
                let c = g.conv2d(store, inp, self.group_w[s - 1], self.group_b[s - 1], 1, 1);
                g.relu(c)
            } else {
                let c = g.conv2d(store, xi, self.group_w[s - 1], self.group_b[s - 1], 2, 1);
                g.relu(c)
            };
            ys.push(y);
        }
        let cat = g.concat_c(&ys);
        let f = g.conv2d(store, cat, self.expand_w, self.expand_b, 1, 0);
        let skip = match self.skip {
            None => x,
            Some((w, b)) => g.conv2d(store, x, w, b, self.stride, 0),
        };
        g.add(skip, f)
    }
}

pub const SCALE: usize = 4;
pub const STEM_CHANNELS: usize = 16;
pub const BLOCK_CHANNELS: [usize; 4] = [16, 32, 64, 128];
pub const BLOCK_STRIDES: [usize; 4] = [1, 2, 2, 2];
pub const EMBED_DIM: usize = 256;

/// The full classifier: stem convolution, four multi-scale residual
/// blocks with interleaved activations, global average pooling, an
/// embedding projection, and a zero-initialized classification head
/// (so the initial loss is exactly ln of the class count).
pub struct FingerprintClassifier {
    n_classes: usize,
    seed: u64,
    store: ParamStore,
    stem_w: ParamId,
    stem_b: ParamId,
    blocks: Vec<Res2Block>,
    proj_w: ParamId,
    proj_b: ParamId,
    head_w: ParamId,
    head_b: ParamId,
}

impl FingerprintClassifier {
    pub fn new(n_classes: usize, seed: u64) -> Result<Self, NnError> {
        if n_classes < 2 {
            return Err(NnError::BadConfig(format!("need at least 2 classes, got {n_classes}")));
        }
        let mut store = ParamStore::new();
        let stem_w = store.add(
            "stem.w",
            &[STEM_CHANNELS, 1, 3, 3],
            he_normal(seed, "stem.w", 9, STEM_CHANNELS * 9),
        );
        let stem_b = store.add("stem.b", &[STEM_CHANNELS], vec![0.0; STEM_CHANNELS]);
        let mut blocks = Vec::new();
        let mut in_c = STEM_CHANNELS;
        for (i, (&out_c, &stride)) in BLOCK_CHANNELS.iter().zip(&BLOCK_STRIDES).enumerate() {
            blocks.push(Res2Block::new(&mut store, &format!("block{}", i + 1), seed, in_c, out_c, stride, SCALE)?);
            in_c = out_c;
        }
        let proj_w = store.add(
            "proj.w",
            &[EMBED_DIM, in_c],
            he_normal(seed, "proj.w", in_c, EMBED_DIM * in_c),
        );
        let proj_b = store.add("proj.b", &[EMBED_DIM], vec![0.0; EMBED_DIM]);
        let head_w = store.add("head.w", &[n_classes, EMBED_DIM], vec![0.0; n_classes * EMBED_DIM]);
        let head_b = store.add("head.b", &[n_classes], vec![0.0; n_classes]);
        store.round_to_f32();
        Ok(Self { n_classes, seed, store, stem_w, stem_b, blocks, proj_w, proj_b, head_w, head_b })
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    /// Rows of the final feature map that see real (non-pad) frames,
    /// following `true_frames` through the stem and block strides
    /// (3x3 kernels, pad 1, so each stride-s layer maps v to v/s + 1).
    fn valid_pool_rows(&self, true_frames: usize) -> usize {
        let mut h = crate::dsp::N_FRAMES;
        let mut v = true_frames.clamp(1, h);
        for s in std::iter::once(2).chain(BLOCK_STRIDES) {
            h = (h - 1) / s + 1;
            v = (v / s + 1).min(h);
        }
        v
    }

    /// Builds the per-item tape. `true_frames` bounds the temporal
    /// pooling region so zero-pad rows do not dilute the embedding.
    /// Returns (graph, logits node, embedding node).
    pub fn forward_item(&self, input: &Tensor, true_frames: usize) -> (Graph, NodeId, NodeId) {
        let mut g = Graph::new();
        let x = g.input(input.clone());
        let stem = g.conv2d(&self.store, x, self.stem_w, self.stem_b, 2, 1);
        let mut cur = g.relu(stem);
        for block in &self.blocks {
            let out = block.forward(&mut g, &self.store, cur);
            cur = g.relu(out);
        }
        let pooled = g.time_masked_avg_pool(cur, self.valid_pool_rows(true_frames));
        let proj = g.linear(&self.store, pooled, self.proj_w, self.proj_b);
        let embed = g.relu(proj);
        let logits = g.linear(&self.store, embed, self.head_w, self.head_b);
        (g, logits, embed)
    }

    pub fn logits(&self, input: &Tensor, true_frames: usize) -> Vec<f64> {
        let (g, logits, _) = self.forward_item(input, true_frames);
        g.value(logits).data.clone()
    }

    /// Argmax prediction; ties resolve to the lowest class index.
    pub fn predict(&self, input: &Tensor, true_frames: usize) -> usize {
        argmax(&self.logits(input, true_frames))
    }

    pub fn predict_batch(&self, inputs: &[LfccMatrix]) -> Vec<usize> {
        inputs.iter().map(|m| self.predict(&lfcc_tensor(m), m.true_frames())).collect()
    }

    pub fn embed_batch(&self, inputs: &[LfccMatrix]) -> Vec<Vec<f64>> {
        inputs
            .iter()
            .map(|m| {
                let (g, _, embed) = self.forward_item(&lfcc_tensor(m), m.true_frames());
                g.value(embed).data.clone()
            })
            .collect()
    }
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0usize;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { lr: 1e-3, batch_size: 16, max_epochs: 30, patience: 5, seed: 0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_macro_f1: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_val_macro_f1: f64,
    pub stopped_early: bool,
}

fn macro_f1_from_indices(y_true: &[usize], y_pred: &[usize], n_classes: usize) -> f64 {
    let classes: Vec<String> = (0..n_classes).map(|i| i.to_string()).collect();
    let cm = ConfusionMatrix::from_indices(y_true, y_pred, &classes).expect("index range checked");
    metrics(&cm).expect("non-empty").macro_avg.f1
}

/// Trains with Adam and early stopping on validation macro-F1
/// (patience in epochs, ties keep the earliest best). The best
/// parameters are restored before returning. Parameters are rounded to
/// f32-representable values after every step.
pub fn train(
    model: &mut FingerprintClassifier,
    train_x: &[LfccMatrix],
    train_y: &[usize],
    val_x: &[LfccMatrix],
    val_y: &[usize],
    cfg: &TrainConfig,
) -> Result<TrainHistory, NnError> {
    if train_x.is_empty() || val_x.is_empty() {
        return Err(NnError::BadConfig("empty training or validation set".into()));
    }
    if train_x.len() != train_y.len() || val_x.len() != val_y.len() {
        return Err(NnError::BadConfig("feature/label length mismatch".into()));
    }
    if let Some(&bad) = train_y.iter().chain(val_y).find(|&&y| y >= model.n_classes) {
        return Err(NnError::BadConfig(format!("label {bad} out of range")));
    }
    if cfg.batch_size == 0 || cfg.max_epochs == 0 {
        return Err(NnError::BadConfig("batch_size and max_epochs must be positive".into()));
    }

    let n_params = model.store.n_values();
    let mut adam = Adam::new(cfg.lr, n_params);
    let mut dstore = vec![0.0f64; n_params];
    let mut order: Vec<usize> = (0..train_x.len()).collect();

    let mut history = TrainHistory {
        epochs: Vec::new(),
        best_epoch: 0,
        best_val_macro_f1: f64::NEG_INFINITY,
        stopped_early: false,
    };
    let mut best_params: Vec<f64> = model.store.data().to_vec();

    for epoch in 0..cfg.max_epochs {
        let mut rng = util::rng_for(cfg.seed, &format!("epoch-{epoch}"));
        util::shuffle(&mut rng, &mut order);

        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            dstore.fill(0.0);
            let mut batch_loss = 0.0;
            for &idx in batch {
                let x = lfcc_tensor(&train_x[idx]);
                let (g, logits, _) = model.forward_item(&x, train_x[idx].true_frames());
                let (loss, mut dl) = softmax_cross_entropy(&g.value(logits).data, train_y[idx]);
                batch_loss += loss;
                let inv = 1.0 / batch.len() as f64;
                for d in &mut dl {
                    *d *= inv;
                }
                g.backward(&model.store, logits, Tensor::vector(dl), &mut dstore);
            }
            batch_loss /= batch.len() as f64;
            if !batch_loss.is_finite() {
                return Err(NnError::Diverged { epoch });
            }
            adam.step(model.store.data_mut(), &dstore);
            model.store.round_to_f32();
            epoch_loss += batch_loss * batch.len() as f64;
        }
        epoch_loss /= train_x.len() as f64;
        if model.store.data().iter().any(|v| !v.is_finite()) {
            return Err(NnError::Diverged { epoch });
        }

        let preds = model.predict_batch(val_x);
        let f1 = macro_f1_from_indices(val_y, &preds, model.n_classes);
        log::info!("epoch {epoch}: train loss {epoch_loss:.4}, val macro-F1 {f1:.4}");
        history.epochs.push(EpochStats { epoch, train_loss: epoch_loss, val_macro_f1: f1 });

        if f1 > history.best_val_macro_f1 {
            history.best_val_macro_f1 = f1;
            history.best_epoch = epoch;
            best_params.copy_from_slice(model.store.data());
        } else if epoch - history.best_epoch >= cfg.patience {
            history.stopped_early = true;
            break;
        }
    }

    model.store.set_data(best_params);
    Ok(history)
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"VTCK";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointMeta {
    pub config_hash: u64,
    pub epoch: u32,
    pub seed: u64,
    pub n_classes: u32,
}

/// Saves all parameters as f32 (exact: values are kept
/// f32-representable throughout).
pub fn save_checkpoint(
    model: &FingerprintClassifier,
    meta: &CheckpointMeta,
    path: impl AsRef<Path>,
) -> Result<(), NnError> {
    let store = &model.store;
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&meta.config_hash.to_le_bytes());
    buf.extend_from_slice(&meta.epoch.to_le_bytes());
    buf.extend_from_slice(&meta.seed.to_le_bytes());
    buf.extend_from_slice(&meta.n_classes.to_le_bytes());
    buf.extend_from_slice(&(store.n_entries() as u32).to_le_bytes());
    for i in 0..store.n_entries() {
        let id = ParamId(i);
        let name = store.name(id).as_bytes();
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name);
        let dims = store.dims(id);
        buf.extend_from_slice(&(dims.len() as u32).to_le_bytes());
        for &d in dims {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in store.slice(id) {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

/// Reads a checkpoint into a freshly constructed model. Every stored
/// tensor must match a parameter by name and dims, and every parameter
/// must be present.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(FingerprintClassifier, CheckpointMeta), NnError> {
    let mut file = fs::File::open(path)?;
    let mut data = Vec::new();
    file.read_to_end(&mut data)?;
    let mut at = 0usize;
    let take = |at: &mut usize, n: usize| -> Result<&[u8], NnError> {
        if *at + n > data.len() {
            return Err(NnError::BadCheckpoint("truncated".into()));
        }
        let s = &data[*at..*at + n];
        *at += n;
        Ok(s)
    };
    let u32_at = |at: &mut usize| -> Result<u32, NnError> {
        Ok(u32::from_le_bytes(take(at, 4)?.try_into().unwrap()))
    };
    let u64_at = |at: &mut usize| -> Result<u64, NnError> {
        Ok(u64::from_le_bytes(take(at, 8)?.try_into().unwrap()))
    };

    if take(&mut at, 4)? != CHECKPOINT_MAGIC {
        return Err(NnError::BadCheckpoint("bad magic".into()));
    }
    let version = u32_at(&mut at)?;
    if version != CHECKPOINT_VERSION {
        return Err(NnError::BadCheckpoint(format!("unsupported version {version}")));
    }
    let meta = CheckpointMeta {
        config_hash: u64_at(&mut at)?,
        epoch: u32_at(&mut at)?,
        seed: u64_at(&mut at)?,
        n_classes: u32_at(&mut at)?,
    };
    let n_tensors = u32_at(&mut at)? as usize;

    let mut model = FingerprintClassifier::new(meta.n_classes as usize, meta.seed)?;
    if n_tensors != model.store.n_entries() {
        return Err(NnError::BadCheckpoint(format!(
            "expected {} tensors, found {n_tensors}",
            model.store.n_entries()
        )));
    }
    for _ in 0..n_tensors {
        let name_len = u32_at(&mut at)? as usize;
        let name = String::from_utf8(take(&mut at, name_len)?.to_vec())
            .map_err(|_| NnError::BadCheckpoint("non-utf8 tensor name".into()))?;
        let ndims = u32_at(&mut at)? as usize;
        let mut dims = Vec::with_capacity(ndims);
        for _ in 0..ndims {
            dims.push(u32_at(&mut at)? as usize);
        }
        let id = model
            .store
            .find(&name)
            .ok_or_else(|| NnError::BadCheckpoint(format!("unknown tensor {name}")))?;
        if model.store.dims(id) != dims.as_slice() {
            return Err(NnError::BadCheckpoint(format!("dims mismatch for {name}")));
        }
        let n = model.store.entry_len(id);
        let bytes = take(&mut at, 4 * n)?;
        let off = model.store.offset(id);
        for (k, chunk) in bytes.chunks_exact(4).enumerate() {
            model.store.data_mut()[off + k] = f32::from_le_bytes(chunk.try_into().unwrap()) as f64;
        }
    }
    if at != data.len() {
        return Err(NnError::BadCheckpoint("trailing bytes".into()));
    }
    Ok((model, meta))
}

/// Central-difference gradient check. Returns the maximum relative
/// error over the given flat parameter indices; `analytic` is aligned
/// with the store's flat data.
pub fn max_grad_rel_error<F>(
    store: &mut ParamStore,
    indices: &[usize],
    analytic: &[f64],
    mut loss_fn: F,
    h: f64,
) -> f64
where
    F: FnMut(&ParamStore) -> f64,
{
    let mut worst = 0.0f64;
    for &i in indices {
        let saved = store.data()[i];
        store.data_mut()[i] = saved + h;
        let lp = loss_fn(store);
        store.data_mut()[i] = saved - h;
        let lm = loss_fn(store);
        store.data_mut()[i] = saved;
        let numeric = (lp - lm) / (2.0 * h);
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
        if rel > worst {
            worst = rel;
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn out_range_matches_brute_force() {
        for len_in in 1..9usize {
            for k in [1usize, 3] {
                for stride in [1usize, 2] {
                    for pad in [0usize, 1] {
                        if len_in + 2 * pad < k {
                            continue;
                        }
                        let len_out = (len_in + 2 * pad - k) / stride + 1;
                        for k_off in 0..k {
                            let (lo, hi) = out_range(len_in, len_out, k_off, stride, pad);
                            for o in 0..len_out {
                                let ix = (o * stride + k_off) as isize - pad as isize;
                                let valid = ix >= 0 && (ix as usize) < len_in;
                                assert_eq!(
                                    valid,
                                    o >= lo && o < hi,
                                    "len_in {len_in} k {k} s {stride} p {pad} off {k_off} o {o}"
                                );
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn conv_identity_kernel_passes_through() {
        let mut store = ParamStore::new();
        let w = store.add("w", &[1, 1, 1, 1], vec![1.0]);
        let b = store.add("b", &[1], vec![0.0]);
        let mut g = Graph::new();
        let x = g.input(Tensor::from_vec(1, 2, 3, vec![1.0, -2.0, 3.0, 4.0, 5.0, -6.0]));
        let y = g.conv2d(&store, x, w, b, 1, 0);
        assert_eq!(g.value(y).data, vec![1.0, -2.0, 3.0, 4.0, 5.0, -6.0]);
    }

    #[test]
    fn conv_hand_example() {
        // 3x3 sum kernel over a padded 2x2 input: each output is the sum
        // of the in-bounds neighborhood.
        let mut store = ParamStore::new();
        let w = store.add("w", &[1, 1, 3, 3], vec![1.0; 9]);
        let b = store.add("b", &[1], vec![0.5]);
        let mut g = Graph::new();
        let x = g.input(Tensor::from_vec(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        let y = g.conv2d(&store, x, w, b, 1, 1);
        assert_eq!(g.value(y).data, vec![10.5, 10.5, 10.5, 10.5]);
    }

    #[test]
    fn strided_conv_dims_match_expected_chain() {
        let mut store = ParamStore::new();
        let w = store.add("w", &[1, 1, 3, 3], vec![0.0; 9]);
        let b = store.add("b", &[1], vec![0.0]);
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(1, 500, 20));
        let y = g.conv2d(&store, x, w, b, 2, 1);
        let yv = g.value(y);
        assert_eq!((yv.h, yv.w), (250, 10));
    }

    #[test]
    fn avgpool_divides_by_nine_including_padding() {
        let mut g = Graph::new();
        let x = g.input(Tensor::from_vec(1, 2, 2, vec![1.0; 4]));
        let y = g.avgpool3(x);
        let yv = g.value(y);
        assert_eq!((yv.c, yv.h, yv.w), (1, 1, 1));
        assert!((yv.data[0] - 4.0 / 9.0).abs() < 1e-15);
    }

    #[test]
    fn masked_pool_excludes_rows_past_the_mask() {
        let mut g = Graph::new();
        // Channel of 4 rows x 2 cols; only the first 2 rows counted.
        let x = g.input(Tensor::from_vec(1, 4, 2, vec![1.0, 3.0, 5.0, 7.0, 100.0, 100.0, 100.0, 100.0]));
        let y = g.time_masked_avg_pool(x, 2);
        assert!((g.value(y).data[0] - 4.0).abs() < 1e-15);
    }

    #[test]
    fn masked_pool_gradient_matches_finite_difference() {
        let mut store = ParamStore::new();
        let w = store.add("w", &[1, 6], vec![0.3, -0.2, 0.5, 0.1, -0.4, 0.25]);
        let b = store.add("b", &[1], vec![0.0]);
        let mut rng = util::rng_for(9, "maskpool-grad");
        let data: Vec<f64> = (0..6 * 5 * 3).map(|_| util::normal(&mut rng)).collect();
        let build = |store: &ParamStore| {
            let mut g = Graph::new();
            let x = g.input(Tensor::from_vec(6, 5, 3, data.clone()));
            let p = g.time_masked_avg_pool(x, 2);
            let y = g.linear(store, p, w, b);
            (g, y)
        };
        let (g, y) = build(&store);
        let mut dstore = vec![0.0; store.n_values()];
        g.backward(&store, y, Tensor::vector(vec![1.0]), &mut dstore);
        let h = 1e-4;
        for i in 0..store.n_values() {
            let orig = store.data()[i];
            store.data_mut()[i] = orig + h;
            let (gu, yu) = build(&store);
            let up = gu.value(yu).data[0];
            store.data_mut()[i] = orig - h;
            let (gd, yd) = build(&store);
            let dn = gd.value(yd).data[0];
            store.data_mut()[i] = orig;
            let fd = (up - dn) / (2.0 * h);
            assert!((dstore[i] - fd).abs() < 1e-6, "param {i}: {} vs {fd}", dstore[i]);
        }
    }

    #[test]
    fn softmax_ce_hand_values() {
        let (loss, d) = softmax_cross_entropy(&[0.0, 0.0], 0);
        assert!((loss - (2.0f64).ln()).abs() < 1e-12);
        assert!((d[0] - (-0.5)).abs() < 1e-12);
        assert!((d[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn zero_head_gives_uniform_probs_and_ln_c_loss() {
        let model = FingerprintClassifier::new(5, 42).unwrap();
        let mut rng = util::rng_for(1, "probe");
        let data: Vec<f64> = (0..500 * 20).map(|_| util::normal(&mut rng)).collect();
        let logits = model.logits(&Tensor::from_vec(1, 500, 20, data), 500);
        let probs = softmax(&logits);
        for &p in &probs {
            assert!((p - 0.2).abs() < 1e-12, "prob {p}");
        }
        let (loss, _) = softmax_cross_entropy(&logits, 3);
        assert!((loss - 5.0f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn block_with_zero_expand_is_identity() {
        let mut store = ParamStore::new();
        let block = Res2Block::new(&mut store, "b", 7, 8, 8, 1, 4).unwrap();
        store.round_to_f32();
        let mut rng = util::rng_for(2, "block-probe");
        let data: Vec<f64> = (0..8 * 6 * 6).map(|_| util::normal(&mut rng) as f32 as f64).collect();
        let t = Tensor::from_vec(8, 6, 6, data.clone());
        let mut g = Graph::new();
        let x = g.input(t);
        let y = block.forward(&mut g, &store, x);
        assert_eq!(g.value(y).data, data);
    }

    #[test]
    fn block_rejects_indivisible_scale() {
        let mut store = ParamStore::new();
        let err = Res2Block::new(&mut store, "b", 0, 8, 10, 1, 4);
        assert!(matches!(err, Err(NnError::BadConfig(_))));
    }

    #[test]
    fn forward_shapes_through_network() {
        let model = FingerprintClassifier::new(4, 3).unwrap();
        let (g, logits, embed) = model.forward_item(&Tensor::zeros(1, 500, 20), 500);
        assert_eq!(g.value(logits).data.len(), 4);
        assert_eq!(g.value(embed).data.len(), EMBED_DIM);
    }

    #[test]
    fn checkpoint_round_trips_bit_exact() {
        let model = FingerprintClassifier::new(3, 11).unwrap();
        let meta = CheckpointMeta { config_hash: 0xDEAD_BEEF, epoch: 7, seed: 11, n_classes: 3 };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.vtck");
        save_checkpoint(&model, &meta, &path).unwrap();
        let (loaded, meta2) = load_checkpoint(&path).unwrap();
        assert_eq!(meta, meta2);
        assert_eq!(model.store.data(), loaded.store.data());

        let mut rng = util::rng_for(9, "ckpt-probe");
        let data: Vec<f64> = (0..500 * 20).map(|_| util::normal(&mut rng)).collect();
        let t = Tensor::from_vec(1, 500, 20, data);
        assert_eq!(model.logits(&t, 500), loaded.logits(&t, 500));
    }

    #[test]
    fn checkpoint_rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.vtck");
        fs::write(&path, b"NOPE not a checkpoint").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(NnError::BadCheckpoint(_))));
    }

    #[test]
    fn adam_descends_a_quadratic() {
        let mut adam = Adam::new(0.1, 2);
        let mut p = vec![3.0f64, -2.0];
        for _ in 0..500 {
            let g: Vec<f64> = p.iter().map(|&v| 2.0 * v).collect();
            adam.step(&mut p, &g);
        }
        assert!(p[0].abs() < 1e-2 && p[1].abs() < 1e-2, "{p:?}");
    }

    #[test]
    fn argmax_ties_resolve_to_lowest_index() {
        assert_eq!(argmax(&[1.0, 1.0, 0.5]), 0);
        assert_eq!(argmax(&[0.1, 0.9, 0.9]), 1);
    }
}
