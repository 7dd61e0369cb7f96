//! Define-by-run reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] lives for one forward/backward pass. Nodes that do not depend
//! on any gradient-requiring leaf are stored as constants and never visited
//! during the backward sweep.

use std::rc::Rc;

use super::kernels::{self, ConvGeom};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-pixel weights of shape `[N, H, W, 1]` (1 = keep / score, 0 = drop).
pub type SpatialWeights = Rc<Tensor>;

enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    Exp(Var),
    Sum(Var),
    AddN(Vec<Var>),
    MaskSpatial(Var, SpatialWeights),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        c_out: usize,
    },
    Depthwise {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    LayerNorm {
        x: Var,
        g: Var,
        b: Var,
        xhat: Vec<f32>,
        rstd: Vec<f32>,
    },
    Gelu(Var),
    Grn {
        x: Var,
        g: Var,
        b: Var,
        gx: Vec<f32>,
        nx: Vec<f32>,
    },
    Upsample(Var, usize),
    Concat(Var, Var),
    Gather(Var, Rc<Vec<u32>>),
    FillMask {
        z: Var,
        token: Var,
        keep: SpatialWeights,
    },
    MaskedMeanPool(Var, SpatialWeights),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    PatchNorm {
        x: Var,
        patch: usize,
        valid: SpatialWeights,
        scale: Vec<f32>,
        floored: Vec<bool>,
    },
    MseSpatial {
        pred: Var,
        target: Var,
        weights: SpatialWeights,
        count: f64,
    },
    MseRows {
        pred: Var,
        target: Var,
        weights: Rc<Vec<f32>>,
        count: f64,
    },
    CrossEntropy {
        scores: Var,
        labels: Rc<Vec<u32>>,
        weights: Rc<Vec<f32>>,
        probs: Vec<f32>,
        count: f64,
    },
    Bce {
        scores: Var,
        targets: Rc<Vec<f32>>,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Mul(a, b) | Op::Concat(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Exp(a)
            | Op::Sum(a)
            | Op::MaskSpatial(a, _)
            | Op::Gelu(a)
            | Op::Upsample(a, _)
            | Op::Gather(a, _)
            | Op::MaskedMeanPool(a, _) => vec![*a],
            Op::AddN(v) => v.clone(),
            Op::Conv2d { x, w, b, .. } | Op::Depthwise { x, w, b, .. } | Op::Linear { x, w, b } => {
                let mut v = vec![*x, *w];
                v.extend(b.iter().copied());
                v
            }
            Op::LayerNorm { x, g, b, .. } | Op::Grn { x, g, b, .. } => vec![*x, *g, *b],
            Op::FillMask { z, token, .. } => vec![*z, *token],
            Op::PatchNorm { x, .. } => vec![*x],
            Op::MseSpatial { pred, target, .. } | Op::MseRows { pred, target, .. } => vec![*pred, *target],
            Op::CrossEntropy { scores, .. } | Op::Bce { scores, .. } => vec![*scores],
        }
    }
}

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    requires_grad: bool,
    op: Op,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    bound: Vec<(Var, ParamId)>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Bind a stored parameter as a leaf; frozen parameters do not require grad.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let trainable = !store.is_frozen(id);
        let v = self.leaf(store.value(id).clone(), trainable);
        if trainable {
            self.bound.push((v, id));
        }
        v
    }

    /// Gradients of all bound trainable parameters after [`Graph::backward`].
    pub fn param_grads(&self) -> Vec<(ParamId, &Tensor)> {
        self.bound
            .iter()
            .filter_map(|&(v, id)| self.nodes[v.0].grad.as_ref().map(|g| (id, g)))
            .collect()
    }

    // ----------------------------------------------------------------- ops

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "add shape mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(ta.shape(), data);
        self.push(t, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "mul shape mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(ta.shape(), data);
        self.push(t, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, k: f32) -> Var {
        let t = self.value(a).map(|v| v * k);
        self.push(t, Op::Scale(a, k))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f32::exp);
        self.push(t, Op::Exp(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().map(|&v| v as f64).sum();
        self.push(Tensor::scalar(s as f32), Op::Sum(a))
    }

    /// Sum of equally shaped values, accumulated in the given order.
    pub fn add_n(&mut self, vars: &[Var]) -> Var {
        assert!(!vars.is_empty());
        let mut acc = self.value(vars[0]).clone();
        for &v in &vars[1..] {
            acc.add_assign(self.value(v));
        }
        self.push(acc, Op::AddN(vars.to_vec()))
    }

    pub fn mask_spatial(&mut self, x: Var, keep: &SpatialWeights) -> Var {
        let tx = self.value(x);
        let (n, h, w, c) = tx.dims4();
        assert_eq!(keep.shape(), &[n, h, w, 1], "mask shape mismatch");
        let mut out = tx.data().to_vec();
        for (row, &m) in out.chunks_exact_mut(c).zip(keep.data()) {
            if m != 1.0 {
                row.iter_mut().for_each(|v| *v *= m);
            }
        }
        let t = Tensor::new(tx.shape(), out);
        self.push(t, Op::MaskSpatial(x, keep.clone()))
    }

    /// Dense convolution; `w` has shape `[k·k·C_in, C_out]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, kernel: usize, stride: usize, pad: usize) -> Var {
        let tx = self.value(x);
        let (n, h, wd, c) = tx.dims4();
        let geom = ConvGeom {
            n,
            h,
            w: wd,
            c_in: c,
            kernel,
            stride,
            pad,
        };
        let tw = self.value(w);
        assert_eq!(tw.shape()[0], geom.patch_len(), "conv weight rows != k*k*C_in");
        let c_out = tw.shape()[1];
        let (ho, wo) = geom.out_hw();
        let rows = geom.rows();
        let mut out = vec![0.0; rows * c_out];
        if let Some(b) = b {
            let tb = self.value(b).data();
            for row in out.chunks_exact_mut(c_out) {
                row.copy_from_slice(tb);
            }
        }
        if geom.is_pointwise() {
            kernels::gemm(rows, c, c_out, tx.data(), false, tw.data(), false, &mut out, b.is_some());
        } else {
            let mut cols = vec![0.0; rows * geom.patch_len()];
            kernels::im2col(tx.data(), &geom, &mut cols);
            kernels::gemm(rows, geom.patch_len(), c_out, &cols, false, tw.data(), false, &mut out, b.is_some());
        }
        let t = Tensor::new(&[n, ho, wo, c_out], out);
        self.push(t, Op::Conv2d { x, w, b, geom, c_out })
    }

    /// Depthwise convolution; `w` has shape `[k·k, C]`.
    pub fn depthwise(&mut self, x: Var, w: Var, b: Option<Var>, kernel: usize, stride: usize, pad: usize) -> Var {
        let tx = self.value(x);
        let (n, h, wd, c) = tx.dims4();
        let geom = ConvGeom {
            n,
            h,
            w: wd,
            c_in: c,
            kernel,
            stride,
            pad,
        };
        assert_eq!(self.value(w).shape(), &[kernel * kernel, c]);
        let (ho, wo) = geom.out_hw();
        let mut out = vec![0.0; n * ho * wo * c];
        kernels::depthwise_forward(
            tx.data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &geom,
            &mut out,
        );
        let t = Tensor::new(&[n, ho, wo, c], out);
        self.push(t, Op::Depthwise { x, w, b, geom })
    }

    /// Layer norm over the last axis (channels of an NHWC tensor or features of `[N, C]`).
    pub fn layer_norm(&mut self, x: Var, g: Var, b: Var) -> Var {
        let tx = self.value(x);
        let c = *tx.shape().last().unwrap();
        let rows = tx.len() / c;
        let mut out = vec![0.0; tx.len()];
        let mut xhat = vec![0.0; tx.len()];
        let mut rstd = vec![0.0; rows];
        kernels::layer_norm_forward(
            tx.data(),
            c,
            self.value(g).data(),
            self.value(b).data(),
            &mut out,
            &mut xhat,
            &mut rstd,
        );
        let t = Tensor::new(tx.shape(), out);
        self.push(t, Op::LayerNorm { x, g, b, xhat, rstd })
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(kernels::gelu);
        self.push(t, Op::Gelu(x))
    }

    /// Global response normalization: `γ·(x·N(x)) + β + x`.
    pub fn grn(&mut self, x: Var, g: Var, b: Var) -> Var {
        let tx = self.value(x);
        let (n, h, w, c) = tx.dims4();
        let (gx, nx) = kernels::grn_stats(tx.data(), n, h * w, c);
        let (tg, tb) = (self.value(g).data(), self.value(b).data());
        let mut out = vec![0.0; tx.len()];
        for s in 0..n {
            let nxs = &nx[s * c..(s + 1) * c];
            let base = s * h * w * c;
            for (o, xr) in out[base..base + h * w * c]
                .chunks_exact_mut(c)
                .zip(tx.data()[base..base + h * w * c].chunks_exact(c))
            {
                for j in 0..c {
                    o[j] = tg[j] * (xr[j] * nxs[j]) + tb[j] + xr[j];
                }
            }
        }
        let t = Tensor::new(tx.shape(), out);
        self.push(t, Op::Grn { x, g, b, gx, nx })
    }

    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Var {
        if factor == 1 {
            return x;
        }
        let tx = self.value(x);
        let (n, h, w, c) = tx.dims4();
        let mut out = vec![0.0; tx.len() * factor * factor];
        kernels::upsample_nearest(tx.data(), n, h, w, c, factor, &mut out);
        let t = Tensor::new(&[n, h * factor, w * factor, c], out);
        self.push(t, Op::Upsample(x, factor))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let (n, h, w, ca) = ta.dims4();
        let (nb, hb, wb, cb) = tb.dims4();
        assert_eq!((n, h, w), (nb, hb, wb), "concat spatial mismatch");
        let mut out = Vec::with_capacity(ta.len() + tb.len());
        for (ra, rb) in ta.data().chunks_exact(ca).zip(tb.data().chunks_exact(cb)) {
            out.extend_from_slice(ra);
            out.extend_from_slice(rb);
        }
        let t = Tensor::new(&[n, h, w, ca + cb], out);
        self.push(t, Op::Concat(a, b))
    }

    /// Rearrange token vectors `[N, gh, gw, p·p·C]` into pixels `[N, gh·p, gw·p, C]`.
    pub fn depth_to_space(&mut self, x: Var, patch: usize) -> Var {
        let tx = self.value(x);
        let (n, gh, gw, d) = tx.dims4();
        assert_eq!(d % (patch * patch), 0);
        let c = d / (patch * patch);
        let idx = kernels::depth_to_space_index(n, gh, gw, patch, c);
        let data = idx.iter().map(|&i| tx.data()[i as usize]).collect();
        let t = Tensor::new(&[n, gh * patch, gw * patch, c], data);
        self.push(t, Op::Gather(x, Rc::new(idx)))
    }

    /// Replace cells with `keep == 0` by the learnable `token` (shape `[C]`).
    pub fn fill_mask(&mut self, z: Var, token: Var, keep: &SpatialWeights) -> Var {
        let tz = self.value(z);
        let (n, h, w, c) = tz.dims4();
        assert_eq!(keep.shape(), &[n, h, w, 1]);
        let tt = self.value(token).data();
        assert_eq!(tt.len(), c, "mask token width");
        let mut out = tz.data().to_vec();
        for (row, &k) in out.chunks_exact_mut(c).zip(keep.data()) {
            if k == 0.0 {
                row.copy_from_slice(tt);
            }
        }
        let t = Tensor::new(tz.shape(), out);
        self.push(t, Op::FillMask {
            z,
            token,
            keep: keep.clone(),
        })
    }

    /// Weighted spatial mean `[N, H, W, C] → [N, C]`. Samples with zero total
    /// weight produce zeros.
    pub fn masked_mean_pool(&mut self, x: Var, weights: &SpatialWeights) -> Var {
        let tx = self.value(x);
        let (n, h, w, c) = tx.dims4();
        assert_eq!(weights.shape(), &[n, h, w, 1]);
        let mut out = vec![0.0f32; n * c];
        for s in 0..n {
            let mut acc = vec![0.0f64; c];
            let mut total = 0.0f64;
            for p in 0..h * w {
                let wt = weights.data()[s * h * w + p] as f64;
                if wt == 0.0 {
                    continue;
                }
                total += wt;
                let row = &tx.data()[(s * h * w + p) * c..][..c];
                for j in 0..c {
                    acc[j] += wt * row[j] as f64;
                }
            }
            if total > 0.0 {
                for j in 0..c {
                    out[s * c + j] = (acc[j] / total) as f32;
                }
            }
        }
        let t = Tensor::new(&[n, c], out);
        self.push(t, Op::MaskedMeanPool(x, weights.clone()))
    }

    /// `[N, C_in] · [C_in, C_out] + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let tx = self.value(x);
        let (n, cin) = tx.dims2();
        let tw = self.value(w);
        assert_eq!(tw.shape()[0], cin, "linear input width");
        let cout = tw.shape()[1];
        let mut out = vec![0.0; n * cout];
        if let Some(b) = b {
            let tb = self.value(b).data();
            for row in out.chunks_exact_mut(cout) {
                row.copy_from_slice(tb);
            }
        }
        kernels::gemm(n, cin, cout, tx.data(), false, tw.data(), false, &mut out, b.is_some());
        let t = Tensor::new(&[n, cout], out);
        self.push(t, Op::Linear { x, w, b })
    }

    /// Per patch and channel standardization over valid pixels, with the
    /// variance floored at [`PATCH_VAR_FLOOR`]. Invalid pixels map to 0.
    pub fn patch_normalize(&mut self, x: Var, patch: usize, valid: &SpatialWeights) -> Var {
        let tx = self.value(x);
        let (n, h, w, c) = tx.dims4();
        assert!(h % patch == 0 && w % patch == 0, "patch must divide the raster");
        assert_eq!(valid.shape(), &[n, h, w, 1]);
        let (gh, gw) = (h / patch, w / patch);
        let groups = n * gh * gw * c;
        let mut scale = vec![0.0f32; groups];
        let mut floored = vec![false; groups];
        let mut out = vec![0.0f32; tx.len()];
        let xd = tx.data();
        let vd = valid.data();
        for s in 0..n {
            for gy in 0..gh {
                for gx in 0..gw {
                    for ch in 0..c {
                        let gid = ((s * gh + gy) * gw + gx) * c + ch;
                        let mut cnt = 0.0f64;
                        let mut sum = 0.0f64;
                        let mut sq = 0.0f64;
                        for py in 0..patch {
                            for px in 0..patch {
                                let pix = (s * h + gy * patch + py) * w + gx * patch + px;
                                if vd[pix] != 0.0 {
                                    let v = xd[pix * c + ch] as f64;
                                    cnt += 1.0;
                                    sum += v;
                                    sq += v * v;
                                }
                            }
                        }
                        if cnt == 0.0 {
                            continue;
                        }
                        let mean = sum / cnt;
                        let var = (sq / cnt - mean * mean).max(0.0);
                        let fl = var < PATCH_VAR_FLOOR as f64;
                        let sd = var.max(PATCH_VAR_FLOOR as f64).sqrt();
                        scale[gid] = (1.0 / sd) as f32;
                        floored[gid] = fl;
                        for py in 0..patch {
                            for px in 0..patch {
                                let pix = (s * h + gy * patch + py) * w + gx * patch + px;
                                if vd[pix] != 0.0 {
                                    out[pix * c + ch] = ((xd[pix * c + ch] as f64 - mean) / sd) as f32;
                                }
                            }
                        }
                    }
                }
            }
        }
        let t = Tensor::new(tx.shape(), out);
        self.push(t, Op::PatchNorm {
            x,
            patch,
            valid: valid.clone(),
            scale,
            floored,
        })
    }

    /// Mean squared error over pixels with non-zero weight, averaged over
    /// weighted pixels × channels. Returns `None` when nothing is scored.
    pub fn mse_spatial(&mut self, pred: Var, target: Var, weights: &SpatialWeights) -> Option<Var> {
        let (tp, tt) = (self.value(pred), self.value(target));
        assert_eq!(tp.shape(), tt.shape(), "mse shape mismatch");
        let (n, h, w, c) = tp.dims4();
        assert_eq!(weights.shape(), &[n, h, w, 1]);
        let count: f64 = weights.data().iter().map(|&v| v as f64).sum::<f64>() * c as f64;
        if count == 0.0 {
            return None;
        }
        let mut acc = 0.0f64;
        for ((rp, rt), &wt) in tp
            .data()
            .chunks_exact(c)
            .zip(tt.data().chunks_exact(c))
            .zip(weights.data())
        {
            if wt == 0.0 {
                continue;
            }
            for j in 0..c {
                let d = (rp[j] - rt[j]) as f64;
                acc += wt as f64 * d * d;
            }
        }
        let t = Tensor::scalar((acc / count) as f32);
        Some(self.push(t, Op::MseSpatial {
            pred,
            target,
            weights: weights.clone(),
            count,
        }))
    }

    /// Row-weighted mean squared error for `[N, C]` predictions.
    pub fn mse_rows(&mut self, pred: Var, target: Var, weights: Rc<Vec<f32>>) -> Option<Var> {
        let (tp, tt) = (self.value(pred), self.value(target));
        assert_eq!(tp.shape(), tt.shape());
        let (n, c) = tp.dims2();
        assert_eq!(weights.len(), n);
        let count: f64 = weights.iter().map(|&v| v as f64).sum::<f64>() * c as f64;
        if count == 0.0 {
            return None;
        }
        let mut acc = 0.0f64;
        for (i, &wt) in weights.iter().enumerate() {
            if wt == 0.0 {
                continue;
            }
            for j in 0..c {
                let d = (tp.data()[i * c + j] - tt.data()[i * c + j]) as f64;
                acc += wt as f64 * d * d;
            }
        }
        let t = Tensor::scalar((acc / count) as f32);
        Some(self.push(t, Op::MseRows {
            pred,
            target,
            weights,
            count,
        }))
    }

    /// Weighted mean negative log-likelihood. `scores` is `[.., K]` with one
    /// label and weight per row. Returns `None` when all weights are zero.
    pub fn cross_entropy(&mut self, scores: Var, labels: Rc<Vec<u32>>, weights: Rc<Vec<f32>>) -> Option<Var> {
        let ts = self.value(scores);
        let k = *ts.shape().last().unwrap();
        let rows = ts.len() / k;
        assert_eq!(labels.len(), rows);
        assert_eq!(weights.len(), rows);
        let count: f64 = weights.iter().map(|&v| v as f64).sum();
        if count == 0.0 {
            return None;
        }
        let mut probs = vec![0.0f32; ts.len()];
        let mut acc = 0.0f64;
        for (r, row) in ts.data().chunks_exact(k).enumerate() {
            let wt = weights[r];
            if wt == 0.0 {
                continue;
            }
            let mx = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
            let z: f64 = row.iter().map(|&v| (v as f64 - mx).exp()).sum();
            let lse = mx + z.ln();
            for j in 0..k {
                probs[r * k + j] = ((row[j] as f64 - lse).exp()) as f32;
            }
            let y = labels[r] as usize;
            assert!(y < k, "label {y} out of range for {k} classes");
            acc += wt as f64 * (lse - row[y] as f64);
        }
        let t = Tensor::scalar((acc / count) as f32);
        Some(self.push(t, Op::CrossEntropy {
            scores,
            labels,
            weights,
            probs,
            count,
        }))
    }

    /// Mean binary cross entropy with logits over all elements.
    pub fn bce_with_logits(&mut self, scores: Var, targets: Rc<Vec<f32>>) -> Var {
        let ts = self.value(scores);
        assert_eq!(ts.len(), targets.len());
        let mut acc = 0.0f64;
        for (&s, &y) in ts.data().iter().zip(targets.iter()) {
            let s = s as f64;
            // log(1 + e^s) - y·s, stable form
            acc += s.max(0.0) - s * y as f64 + (1.0 + (-s.abs()).exp()).ln();
        }
        let t = Tensor::scalar((acc / ts.len() as f64) as f32);
        self.push(t, Op::Bce { scores, targets })
    }

    // ------------------------------------------------------------ backward

    /// Reverse sweep from a scalar `loss`. Gradients are retained on every
    /// gradient-requiring leaf; intermediate gradients are released.
    pub fn backward(&mut self, loss: Var) {
        assert_eq!(self.value(loss).len(), 1, "backward requires a scalar");
        if !self.nodes[loss.0].requires_grad {
            return;
        }
        self.nodes[loss.0].grad = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(grad) = self.nodes[i].grad.take() else {
                continue;
            };
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            self.backward_op(i, &op, &grad);
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn accumulate(&mut self, v: Var, g: Vec<f32>) {
        let node = &mut self.nodes[v.0];
        match &mut node.grad {
            Some(existing) => {
                for (a, b) in existing.data_mut().iter_mut().zip(&g) {
                    *a += b;
                }
            }
            None => node.grad = Some(Tensor::new(node.value.shape(), g)),
        }
    }

    fn backward_op(&mut self, i: usize, op: &Op, grad: &Tensor) {
        let gd = grad.data();
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.needs(v) {
                        self.accumulate(v, gd.to_vec());
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let g = gd.iter().zip(self.value(*b).data()).map(|(g, y)| g * y).collect();
                    self.accumulate(*a, g);
                }
                if self.needs(*b) {
                    let g = gd.iter().zip(self.value(*a).data()).map(|(g, x)| g * x).collect();
                    self.accumulate(*b, g);
                }
            }
            Op::Scale(a, k) => {
                let g = gd.iter().map(|g| g * k).collect();
                self.accumulate(*a, g);
            }
            Op::Exp(a) => {
                let g = gd.iter().zip(self.nodes[i].value.data()).map(|(g, y)| g * y).collect();
                self.accumulate(*a, g);
            }
            Op::Sum(a) => {
                let g = vec![gd[0]; self.value(*a).len()];
                self.accumulate(*a, g);
            }
            Op::AddN(vars) => {
                for &v in vars {
                    if self.needs(v) {
                        self.accumulate(v, gd.to_vec());
                    }
                }
            }
            Op::MaskSpatial(x, keep) => {
                let c = *grad.shape().last().unwrap();
                let mut g = gd.to_vec();
                for (row, &m) in g.chunks_exact_mut(c).zip(keep.data()) {
                    if m != 1.0 {
                        row.iter_mut().for_each(|v| *v *= m);
                    }
                }
                self.accumulate(*x, g);
            }
            Op::Conv2d { x, w, b, geom, c_out } => {
                let rows = geom.rows();
                let plen = geom.patch_len();
                let cols_owned;
                let cols: &[f32] = if geom.is_pointwise() {
                    self.value(*x).data()
                } else {
                    let mut c = vec![0.0; rows * plen];
                    kernels::im2col(self.value(*x).data(), geom, &mut c);
                    cols_owned = c;
                    &cols_owned
                };
                let dw = if self.needs(*w) {
                    let mut dw = vec![0.0; plen * c_out];
                    kernels::gemm(plen, rows, *c_out, cols, true, gd, false, &mut dw, false);
                    Some(dw)
                } else {
                    None
                };
                let dx = if self.needs(*x) {
                    let mut dcols = vec![0.0; rows * plen];
                    kernels::gemm(rows, *c_out, plen, gd, false, self.value(*w).data(), true, &mut dcols, false);
                    if geom.is_pointwise() {
                        Some(dcols)
                    } else {
                        let mut dx = vec![0.0; self.value(*x).len()];
                        kernels::col2im(&dcols, geom, &mut dx);
                        Some(dx)
                    }
                } else {
                    None
                };
                if let Some(b) = b.filter(|b| self.needs(*b)) {
                    let mut db = vec![0.0; *c_out];
                    for row in gd.chunks_exact(*c_out) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    self.accumulate(b, db);
                }
                if let Some(dw) = dw {
                    self.accumulate(*w, dw);
                }
                if let Some(dx) = dx {
                    self.accumulate(*x, dx);
                }
            }
            Op::Depthwise { x, w, b, geom } => {
                let mut dx = self.needs(*x).then(|| vec![0.0; self.value(*x).len()]);
                let mut dw = self.needs(*w).then(|| vec![0.0; self.value(*w).len()]);
                let mut db = b.filter(|b| self.needs(*b)).map(|_| vec![0.0; geom.c_in]);
                kernels::depthwise_backward(
                    self.value(*x).data(),
                    self.value(*w).data(),
                    gd,
                    geom,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                if let Some(g) = dx {
                    self.accumulate(*x, g);
                }
                if let Some(g) = dw {
                    self.accumulate(*w, g);
                }
                if let (Some(g), Some(b)) = (db, b) {
                    self.accumulate(*b, g);
                }
            }
            Op::LayerNorm { x, g, b, xhat, rstd } => {
                let c = self.value(*g).len();
                let mut dx = self.needs(*x).then(|| vec![0.0; gd.len()]);
                let mut dg = self.needs(*g).then(|| vec![0.0; c]);
                let mut db = self.needs(*b).then(|| vec![0.0; c]);
                kernels::layer_norm_backward(
                    gd,
                    xhat,
                    rstd,
                    self.value(*g).data(),
                    c,
                    dx.as_deref_mut(),
                    dg.as_deref_mut(),
                    db.as_deref_mut(),
                );
                if let Some(v) = dx {
                    self.accumulate(*x, v);
                }
                if let Some(v) = dg {
                    self.accumulate(*g, v);
                }
                if let Some(v) = db {
                    self.accumulate(*b, v);
                }
            }
            Op::Gelu(x) => {
                let g = gd
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(g, &v)| g * kernels::gelu_grad(v))
                    .collect();
                self.accumulate(*x, g);
            }
            Op::Grn { x, g, b, gx, nx } => {
                let tx = self.value(*x);
                let (n, h, w, c) = tx.dims4();
                let hw = h * w;
                let tg = self.value(*g).data().to_vec();
                let xd = tx.data();
                let mut dgam = vec![0.0f32; c];
                let mut dbet = vec![0.0f32; c];
                // s_c = Σ_hw dy·x per sample
                let mut sdx = vec![0.0f64; n * c];
                for s in 0..n {
                    let base = s * hw * c;
                    for (gr, xr) in gd[base..base + hw * c]
                        .chunks_exact(c)
                        .zip(xd[base..base + hw * c].chunks_exact(c))
                    {
                        for j in 0..c {
                            sdx[s * c + j] += (gr[j] * xr[j]) as f64;
                            dbet[j] += gr[j];
                        }
                    }
                    for j in 0..c {
                        dgam[j] += (sdx[s * c + j] * nx[s * c + j] as f64) as f32;
                    }
                }
                if self.needs(*x) {
                    let mut dx = vec![0.0f32; xd.len()];
                    for s in 0..n {
                        let gs = &gx[s * c..(s + 1) * c];
                        let mean = gs.iter().map(|&v| v as f64).sum::<f64>() / c as f64;
                        let denom = mean + kernels::GRN_EPS as f64;
                        // dN_c = γ_c·s_c ; N_c = G_c/denom
                        let dn: Vec<f64> = (0..c).map(|j| tg[j] as f64 * sdx[s * c + j]).collect();
                        let cross: f64 = (0..c).map(|j| dn[j] * gs[j] as f64).sum::<f64>() / (denom * denom * c as f64);
                        let dg_c: Vec<f64> = (0..c).map(|j| dn[j] / denom - cross).collect();
                        let base = s * hw * c;
                        for p in 0..hw {
                            for j in 0..c {
                                let idx = base + p * c + j;
                                let direct = gd[idx] * (1.0 + tg[j] * nx[s * c + j]);
                                let via_norm = if gs[j] > 0.0 {
                                    (dg_c[j] * xd[idx] as f64 / gs[j] as f64) as f32
                                } else {
                                    0.0
                                };
                                dx[idx] = direct + via_norm;
                            }
                        }
                    }
                    self.accumulate(*x, dx);
                }
                if self.needs(*g) {
                    self.accumulate(*g, dgam);
                }
                if self.needs(*b) {
                    self.accumulate(*b, dbet);
                }
            }
            Op::Upsample(x, f) => {
                let (n, h, w, c) = self.value(*x).dims4();
                let mut dx = vec![0.0; n * h * w * c];
                kernels::upsample_nearest_backward(gd, n, h, w, c, *f, &mut dx);
                self.accumulate(*x, dx);
            }
            Op::Concat(a, b) => {
                let ca = *self.value(*a).shape().last().unwrap();
                let cb = *self.value(*b).shape().last().unwrap();
                let rows = gd.len() / (ca + cb);
                if self.needs(*a) {
                    let mut g = Vec::with_capacity(rows * ca);
                    for r in gd.chunks_exact(ca + cb) {
                        g.extend_from_slice(&r[..ca]);
                    }
                    self.accumulate(*a, g);
                }
                if self.needs(*b) {
                    let mut g = Vec::with_capacity(rows * cb);
                    for r in gd.chunks_exact(ca + cb) {
                        g.extend_from_slice(&r[ca..]);
                    }
                    self.accumulate(*b, g);
                }
            }
            Op::Gather(x, idx) => {
                let mut g = vec![0.0; self.value(*x).len()];
                for (o, &src) in idx.iter().enumerate() {
                    g[src as usize] += gd[o];
                }
                self.accumulate(*x, g);
            }
            Op::FillMask { z, token, keep } => {
                let c = self.value(*token).len();
                if self.needs(*z) {
                    let mut g = gd.to_vec();
                    for (row, &k) in g.chunks_exact_mut(c).zip(keep.data()) {
                        if k == 0.0 {
                            row.fill(0.0);
                        }
                    }
                    self.accumulate(*z, g);
                }
                if self.needs(*token) {
                    let mut g = vec![0.0f32; c];
                    for (row, &k) in gd.chunks_exact(c).zip(keep.data()) {
                        if k == 0.0 {
                            for (d, v) in g.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                    }
                    self.accumulate(*token, g);
                }
            }
            Op::MaskedMeanPool(x, weights) => {
                let (n, h, w, c) = self.value(*x).dims4();
                let mut dx = vec![0.0f32; n * h * w * c];
                for s in 0..n {
                    let ws = &weights.data()[s * h * w..(s + 1) * h * w];
                    let total: f64 = ws.iter().map(|&v| v as f64).sum();
                    if total == 0.0 {
                        continue;
                    }
                    let go = &gd[s * c..(s + 1) * c];
                    for p in 0..h * w {
                        if ws[p] == 0.0 {
                            continue;
                        }
                        let k = (ws[p] as f64 / total) as f32;
                        let row = &mut dx[(s * h * w + p) * c..][..c];
                        for j in 0..c {
                            row[j] = go[j] * k;
                        }
                    }
                }
                self.accumulate(*x, dx);
            }
            Op::Linear { x, w, b } => {
                let (n, cin) = self.value(*x).dims2();
                let cout = self.value(*w).shape()[1];
                if self.needs(*w) {
                    let mut dw = vec![0.0; cin * cout];
                    kernels::gemm(cin, n, cout, self.value(*x).data(), true, gd, false, &mut dw, false);
                    self.accumulate(*w, dw);
                }
                if self.needs(*x) {
                    let mut dx = vec![0.0; n * cin];
                    kernels::gemm(n, cout, cin, gd, false, self.value(*w).data(), true, &mut dx, false);
                    self.accumulate(*x, dx);
                }
                if let Some(b) = b.filter(|b| self.needs(*b)) {
                    let mut db = vec![0.0; cout];
                    for row in gd.chunks_exact(cout) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    self.accumulate(b, db);
                }
            }
            Op::PatchNorm {
                x,
                patch,
                valid,
                scale,
                floored,
            } => {
                let (n, h, w, c) = self.value(*x).dims4();
                let (gh, gw) = (h / patch, w / patch);
                let y = self.nodes[i].value.data();
                let vd = valid.data();
                let mut dx = vec![0.0f32; n * h * w * c];
                let pixels = |s: usize, gy: usize, gx: usize| {
                    (0..patch * patch).map(move |q| (s * h + gy * patch + q / patch) * w + gx * patch + q % patch)
                };
                for s in 0..n {
                    for gy in 0..gh {
                        for gx in 0..gw {
                            for ch in 0..c {
                                let gid = ((s * gh + gy) * gw + gx) * c + ch;
                                let k = scale[gid] as f64;
                                if k == 0.0 {
                                    continue;
                                }
                                let mut cnt = 0.0f64;
                                let mut mg = 0.0f64;
                                let mut mgy = 0.0f64;
                                for pix in pixels(s, gy, gx) {
                                    if vd[pix] != 0.0 {
                                        let e = pix * c + ch;
                                        cnt += 1.0;
                                        mg += gd[e] as f64;
                                        mgy += gd[e] as f64 * y[e] as f64;
                                    }
                                }
                                mg /= cnt;
                                mgy /= cnt;
                                if floored[gid] {
                                    mgy = 0.0;
                                }
                                for pix in pixels(s, gy, gx) {
                                    if vd[pix] != 0.0 {
                                        let e = pix * c + ch;
                                        dx[e] = (k * (gd[e] as f64 - mg - y[e] as f64 * mgy)) as f32;
                                    }
                                }
                            }
                        }
                    }
                }
                self.accumulate(*x, dx);
            }
            Op::MseSpatial {
                pred,
                target,
                weights,
                count,
            } => {
                let c = *self.value(*pred).shape().last().unwrap();
                let k = 2.0 * gd[0] as f64 / count;
                let mut g = vec![0.0f32; self.value(*pred).len()];
                {
                    let (tp, tt) = (self.value(*pred).data(), self.value(*target).data());
                    for (p, &wt) in weights.data().iter().enumerate() {
                        if wt == 0.0 {
                            continue;
                        }
                        for j in 0..c {
                            let e = p * c + j;
                            g[e] = (k * wt as f64 * (tp[e] - tt[e]) as f64) as f32;
                        }
                    }
                }
                if self.needs(*target) {
                    self.accumulate(*target, g.iter().map(|v| -v).collect());
                }
                if self.needs(*pred) {
                    self.accumulate(*pred, g);
                }
            }
            Op::MseRows {
                pred,
                target,
                weights,
                count,
            } => {
                let (_, c) = self.value(*pred).dims2();
                let k = 2.0 * gd[0] as f64 / count;
                let mut g = vec![0.0f32; self.value(*pred).len()];
                {
                    let (tp, tt) = (self.value(*pred).data(), self.value(*target).data());
                    for (r, &wt) in weights.iter().enumerate() {
                        for j in 0..c {
                            let e = r * c + j;
                            g[e] = (k * wt as f64 * (tp[e] - tt[e]) as f64) as f32;
                        }
                    }
                }
                if self.needs(*target) {
                    self.accumulate(*target, g.iter().map(|v| -v).collect());
                }
                if self.needs(*pred) {
                    self.accumulate(*pred, g);
                }
            }
            Op::CrossEntropy {
                scores,
                labels,
                weights,
                probs,
                count,
            } => {
                let k = *self.value(*scores).shape().last().unwrap();
                let scale = gd[0] as f64 / count;
                let mut g = vec![0.0f32; probs.len()];
                for (r, &wt) in weights.iter().enumerate() {
                    if wt == 0.0 {
                        continue;
                    }
                    let f = scale * wt as f64;
                    for j in 0..k {
                        let ind = if j == labels[r] as usize { 1.0 } else { 0.0 };
                        g[r * k + j] = (f * (probs[r * k + j] as f64 - ind)) as f32;
                    }
                }
                self.accumulate(*scores, g);
            }
            Op::Bce { scores, targets } => {
                let ts = self.value(*scores).data();
                let scale = gd[0] / ts.len() as f32;
                let g = ts
                    .iter()
                    .zip(targets.iter())
                    .map(|(&s, &y)| scale * (1.0 / (1.0 + (-s).exp()) - y))
                    .collect();
                self.accumulate(*scores, g);
            }
        }
    }
}

/// Variance floor used by [`Graph::patch_normalize`].
pub const PATCH_VAR_FLOOR: f32 = 1e-6;
