//! Tape-based reverse-mode differentiation over [`Tensor`].
//!
//! A [`Graph`] owns every intermediate value; operations append nodes and
//! return [`Var`] handles. `backward` walks the tape once and returns
//! gradients for every leaf that was registered with `requires_grad`.
//! Shapes are checked with assertions: mis-shaped graph construction is a
//! programming error, public module boundaries validate user input.

use std::collections::BTreeMap;

use crate::error::Result;
use crate::params::ParameterStore;
use crate::tensor::{pixel_shuffle, space_to_depth, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(String, Var, bool)>,
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
    /// im2col matrix kept for conv weight gradients.
    col_cache: Option<Vec<f32>>,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    AddConst(Var),
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    Sigmoid(Var),
    Gelu(Var),
    AddBias { x: Var, b: Var },
    Conv2d { x: Var, w: Var, b: Var, stride: usize, pad: usize },
    Linear { x: Var, w: Var, b: Var },
    MatMul(Var, Var),
    Transpose2d(Var),
    SoftmaxRows(Var),
    SoftmaxChannels(Var),
    LayerNormRows { x: Var, gamma: Var, beta: Var },
    ChannelNorm(Var),
    SumAll(Var),
    GlobalAvgPool(Var),
    PixelShuffle(Var, usize),
    SpaceToDepth(Var, usize),
    ConcatC(Var, Var),
    SliceC { x: Var, from: usize, to: usize },
    UpsampleBilinear(Var, usize),
    DeformSample { feat: Var, offsets: Var, weights: Var },
    CumsumVec(Var),
    ExpectBins { probs: Var, centers: Var },
    Reshape(Var),
}

/// Gradients produced by [`Graph::backward`].
pub struct Grads {
    by_index: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.by_index[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.by_index[v.0].take()
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self { nodes: Vec::with_capacity(128), params: Vec::new() }
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { op, value, requires_grad, col_cache: None });
        Var(self.nodes.len() - 1)
    }

    fn req(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f32 {
        let t = self.value(v);
        assert_eq!(t.numel(), 1, "expected scalar node");
        t.data()[0]
    }

    /// Constant leaf; no gradient is tracked through it.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t, false)
    }

    /// Leaf that accumulates a gradient (parameters, optimized features).
    pub fn leaf_grad(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t, true)
    }

    /// Registers a named parameter from the store. Gradient is tracked only
    /// for trainable parameters.
    pub fn param(&mut self, store: &ParameterStore, name: &str) -> Result<Var> {
        let t = store.get(name)?.clone();
        let trainable = store.is_trainable(name)?;
        let v = self.push(Op::Leaf, t, trainable);
        self.params.push((name.to_string(), v, trainable));
        Ok(v)
    }

    pub fn param_vars(&self) -> &[(String, Var, bool)] {
        &self.params
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let t = self.value(a).add(self.value(b)).expect("add shape");
        self.push(Op::Add(a, b), t, self.req(a) || self.req(b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let t = self.value(a).sub(self.value(b)).expect("sub shape");
        self.push(Op::Sub(a, b), t, self.req(a) || self.req(b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let t = self.value(a).zip_map(self.value(b), |x, y| x * y).expect("mul shape");
        self.push(Op::Mul(a, b), t, self.req(a) || self.req(b))
    }

    pub fn scale(&mut self, a: Var, c: f32) -> Var {
        let t = self.value(a).scale(c);
        self.push(Op::Scale(a, c), t, self.req(a))
    }

    pub fn add_const(&mut self, a: Var, c: f32) -> Var {
        let t = self.value(a).map(|v| v + c);
        self.push(Op::AddConst(a), t, self.req(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f32::exp);
        self.push(Op::Exp(a), t, self.req(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f32::ln);
        self.push(Op::Ln(a), t, self.req(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f32::sqrt);
        self.push(Op::Sqrt(a), t, self.req(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.value(a).map(sigmoid);
        self.push(Op::Sigmoid(a), t, self.req(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(gelu);
        self.push(Op::Gelu(a), t, self.req(a))
    }

    /// x:(C,H,W) plus per-channel bias b:(C).
    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let (c, h, w) = self.value(x).chw().expect("add_bias expects CHW");
        assert_eq!(self.value(b).dims(), &[c], "bias length");
        let hw = h * w;
        let mut out = self.value(x).data().to_vec();
        let bias = self.value(b).data();
        for ci in 0..c {
            let bv = bias[ci];
            for v in &mut out[ci * hw..(ci + 1) * hw] {
                *v += bv;
            }
        }
        let t = Tensor::from_raw(vec![c, h, w], out);
        self.push(Op::AddBias { x, b }, t, self.req(x) || self.req(b))
    }

    // ---- dense / conv ----

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let n = self.value(x).numel();
        let wd = self.value(w).dims().to_vec();
        assert_eq!(wd.len(), 2, "linear weight is 2-d");
        assert_eq!(wd[1], n, "linear in-features");
        let m = wd[0];
        assert_eq!(self.value(b).numel(), m, "linear bias");
        let mut out = self.value(b).data().to_vec();
        let wm = self.value(w).data();
        let xv = self.value(x).data();
        for (mi, o) in out.iter_mut().enumerate() {
            *o += dot(&wm[mi * n..(mi + 1) * n], xv);
        }
        let t = Tensor::from_raw(vec![m], out);
        let rg = self.req(x) || self.req(w) || self.req(b);
        self.push(Op::Linear { x, w, b }, t, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let ad = self.value(a).dims().to_vec();
        let bd = self.value(b).dims().to_vec();
        assert!(ad.len() == 2 && bd.len() == 2 && ad[1] == bd[0], "matmul {ad:?} x {bd:?}");
        let (m, k, n) = (ad[0], ad[1], bd[1]);
        let mut out = vec![0.0f32; m * n];
        matmul_nn(self.value(a).data(), m, k, self.value(b).data(), n, &mut out);
        let t = Tensor::from_raw(vec![m, n], out);
        self.push(Op::MatMul(a, b), t, self.req(a) || self.req(b))
    }

    pub fn transpose2d(&mut self, a: Var) -> Var {
        let ad = self.value(a).dims().to_vec();
        assert_eq!(ad.len(), 2, "transpose2d expects 2-d");
        let (m, n) = (ad[0], ad[1]);
        let t = Tensor::from_raw(vec![n, m], transpose(self.value(a).data(), m, n));
        self.push(Op::Transpose2d(a), t, self.req(a))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let (cin, h, wi) = self.value(x).chw().expect("conv input CHW");
        let wd = self.value(w).dims().to_vec();
        assert_eq!(wd.len(), 4, "conv weight (Cout,Cin,kh,kw)");
        let (cout, wcin, kh, kw) = (wd[0], wd[1], wd[2], wd[3]);
        assert_eq!(wcin, cin, "conv channel mismatch");
        assert_eq!(self.value(b).numel(), cout, "conv bias");
        assert!(h + 2 * pad >= kh && wi + 2 * pad >= kw, "conv kernel larger than input");
        let hout = (h + 2 * pad - kh) / stride + 1;
        let wout = (wi + 2 * pad - kw) / stride + 1;
        let k = cin * kh * kw;
        let n = hout * wout;
        let col = im2col(self.value(x).data(), cin, h, wi, kh, kw, stride, pad, hout, wout);
        let mut out = vec![0.0f32; cout * n];
        let bias = self.value(b).data();
        for (mi, row) in out.chunks_exact_mut(n).enumerate() {
            row.fill(bias[mi]);
        }
        matmul_nn_acc(self.value(w).data(), cout, k, &col, n, &mut out);
        let t = Tensor::from_raw(vec![cout, hout, wout], out);
        let rg = self.req(x) || self.req(w) || self.req(b);
        let v = self.push(Op::Conv2d { x, w, b, stride, pad }, t, rg);
        if self.req(w) {
            self.nodes[v.0].col_cache = Some(col);
        }
        v
    }

    // ---- normalization / reductions ----

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let ad = self.value(a).dims().to_vec();
        assert_eq!(ad.len(), 2, "softmax_rows expects 2-d");
        let (m, n) = (ad[0], ad[1]);
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_exact_mut(n) {
            softmax_inplace(row);
        }
        let t = Tensor::from_raw(vec![m, n], out);
        self.push(Op::SoftmaxRows(a), t, self.req(a))
    }

    /// Softmax over the channel axis of (C,H,W), or over a 1-d vector.
    pub fn softmax_channels(&mut self, a: Var) -> Var {
        let dims = self.value(a).dims().to_vec();
        let (c, hw) = channels_layout(&dims);
        let src = self.value(a).data();
        let mut out = vec![0.0f32; src.len()];
        let mut buf = vec![0.0f32; c];
        for p in 0..hw {
            for ci in 0..c {
                buf[ci] = src[ci * hw + p];
            }
            softmax_inplace(&mut buf);
            for ci in 0..c {
                out[ci * hw + p] = buf[ci];
            }
        }
        let t = Tensor::from_raw(dims, out);
        self.push(Op::SoftmaxChannels(a), t, self.req(a))
    }

    pub fn layer_norm_rows(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xd = self.value(x).dims().to_vec();
        assert_eq!(xd.len(), 2, "layer_norm_rows expects 2-d");
        let (m, n) = (xd[0], xd[1]);
        assert_eq!(self.value(gamma).numel(), n);
        assert_eq!(self.value(beta).numel(), n);
        let src = self.value(x).data();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut out = vec![0.0f32; m * n];
        for r in 0..m {
            let row = &src[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f32>() / n as f32;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n as f32;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            for j in 0..n {
                out[r * n + j] = (row[j] - mean) * inv * g[j] + bt[j];
            }
        }
        let t = Tensor::from_raw(vec![m, n], out);
        let rg = self.req(x) || self.req(gamma) || self.req(beta);
        self.push(Op::LayerNormRows { x, gamma, beta }, t, rg)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f32 = self.value(a).data().iter().sum();
        self.push(Op::SumAll(a), Tensor::from_raw(vec![1], vec![s]), self.req(a))
    }

    pub fn global_avg_pool(&mut self, a: Var) -> Var {
        let (c, h, w) = self.value(a).chw().expect("pool expects CHW");
        let hw = (h * w) as f32;
        let src = self.value(a).data();
        let out: Vec<f32> = (0..c)
            .map(|ci| src[ci * h * w..(ci + 1) * h * w].iter().sum::<f32>() / hw)
            .collect();
        self.push(Op::GlobalAvgPool(a), Tensor::from_raw(vec![c], out), self.req(a))
    }

    // ---- layout ----

    pub fn pixel_shuffle(&mut self, a: Var, r: usize) -> Var {
        let t = pixel_shuffle(self.value(a), r).expect("pixel_shuffle shape");
        self.push(Op::PixelShuffle(a, r), t, self.req(a))
    }

    pub fn space_to_depth(&mut self, a: Var, r: usize) -> Var {
        let t = space_to_depth(self.value(a), r).expect("space_to_depth shape");
        self.push(Op::SpaceToDepth(a, r), t, self.req(a))
    }

    pub fn concat_c(&mut self, a: Var, b: Var) -> Var {
        let (ca, h, w) = self.value(a).chw().expect("concat CHW");
        let (cb, hb, wb) = self.value(b).chw().expect("concat CHW");
        assert!(h == hb && w == wb, "concat spatial mismatch");
        let mut data = Vec::with_capacity((ca + cb) * h * w);
        data.extend_from_slice(self.value(a).data());
        data.extend_from_slice(self.value(b).data());
        let t = Tensor::from_raw(vec![ca + cb, h, w], data);
        self.push(Op::ConcatC(a, b), t, self.req(a) || self.req(b))
    }

    pub fn slice_c(&mut self, x: Var, from: usize, to: usize) -> Var {
        let (c, h, w) = self.value(x).chw().expect("slice CHW");
        assert!(from < to && to <= c, "slice range {from}..{to} of {c}");
        let hw = h * w;
        let data = self.value(x).data()[from * hw..to * hw].to_vec();
        let t = Tensor::from_raw(vec![to - from, h, w], data);
        self.push(Op::SliceC { x, from, to }, t, self.req(x))
    }

    pub fn reshape(&mut self, x: Var, dims: Vec<usize>) -> Var {
        assert_eq!(
            dims.iter().product::<usize>(),
            self.value(x).numel(),
            "reshape element count"
        );
        let t = Tensor::from_raw(dims, self.value(x).data().to_vec());
        self.push(Op::Reshape(x), t, self.req(x))
    }

    /// Standardizes each pixel's channel vector to zero mean and unit
    /// variance (no learned affine).
    pub fn channel_norm(&mut self, x: Var) -> Var {
        let (c, h, w) = self.value(x).chw().expect("channel_norm CHW");
        let hw = h * w;
        let src = self.value(x).data();
        let mut out = vec![0.0f32; c * hw];
        for p in 0..hw {
            let mut mean = 0.0f32;
            for ci in 0..c {
                mean += src[ci * hw + p];
            }
            mean /= c as f32;
            let mut var = 0.0f32;
            for ci in 0..c {
                let d = src[ci * hw + p] - mean;
                var += d * d;
            }
            var /= c as f32;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            for ci in 0..c {
                out[ci * hw + p] = (src[ci * hw + p] - mean) * inv;
            }
        }
        let t = Tensor::from_raw(vec![c, h, w], out);
        self.push(Op::ChannelNorm(x), t, self.req(x))
    }

    pub fn upsample_bilinear(&mut self, x: Var, r: usize) -> Var {
        assert!(r >= 1);
        let (c, h, w) = self.value(x).chw().expect("upsample CHW");
        let (ho, wo) = (h * r, w * r);
        let src = self.value(x).data();
        let mut out = vec![0.0f32; c * ho * wo];
        for oy in 0..ho {
            let (y0, y1, fy) = src_coords(oy, r, h);
            for ox in 0..wo {
                let (x0, x1, fx) = src_coords(ox, r, w);
                for ci in 0..c {
                    let base = ci * h * w;
                    let v = (1.0 - fy) * (1.0 - fx) * src[base + y0 * w + x0]
                        + (1.0 - fy) * fx * src[base + y0 * w + x1]
                        + fy * (1.0 - fx) * src[base + y1 * w + x0]
                        + fy * fx * src[base + y1 * w + x1];
                    out[(ci * ho + oy) * wo + ox] = v;
                }
            }
        }
        let t = Tensor::from_raw(vec![c, ho, wo], out);
        self.push(Op::UpsampleBilinear(x, r), t, self.req(x))
    }

    /// Weighted bilinear gather: per output pixel, k samples of `feat` taken
    /// at (grid + offset) with clamp-to-edge, combined with per-point weights.
    pub fn deform_sample(&mut self, feat: Var, offsets: Var, weights: Var) -> Var {
        let (c, h, w) = self.value(feat).chw().expect("deform feat CHW");
        let (oc, oh, ow) = self.value(offsets).chw().expect("deform offsets CHW");
        let (kc, kh2, kw2) = self.value(weights).chw().expect("deform weights CHW");
        assert!(oh == h && ow == w && kh2 == h && kw2 == w, "deform spatial mismatch");
        assert_eq!(oc, 2 * kc, "offsets carry (dy,dx) per sample point");
        let k = kc;
        let fv = self.value(feat).data();
        let off = self.value(offsets).data();
        let wv = self.value(weights).data();
        let hw = h * w;
        let mut out = vec![0.0f32; c * hw];
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                for j in 0..k {
                    let py = y as f32 + off[(2 * j) * hw + p];
                    let px = x as f32 + off[(2 * j + 1) * hw + p];
                    let wj = wv[j * hw + p];
                    let s = BilinearTap::at(py, px, h, w);
                    for ci in 0..c {
                        out[ci * hw + p] += wj * s.read(&fv[ci * hw..(ci + 1) * hw], w);
                    }
                }
            }
        }
        let t = Tensor::from_raw(vec![c, h, w], out);
        let rg = self.req(feat) || self.req(offsets) || self.req(weights);
        self.push(Op::DeformSample { feat, offsets, weights }, t, rg)
    }

    pub fn cumsum_vec(&mut self, x: Var) -> Var {
        let xd = self.value(x).dims().to_vec();
        assert_eq!(xd.len(), 1, "cumsum_vec expects 1-d");
        let mut acc = 0.0f32;
        let out: Vec<f32> = self
            .value(x)
            .data()
            .iter()
            .map(|&v| {
                acc += v;
                acc
            })
            .collect();
        self.push(Op::CumsumVec(x), Tensor::from_raw(xd, out), self.req(x))
    }

    /// Per-pixel expectation over bins: probs (B,H,W) x centers (B) -> (1,H,W).
    pub fn expect_bins(&mut self, probs: Var, centers: Var) -> Var {
        let (b, h, w) = self.value(probs).chw().expect("probs CHW");
        assert_eq!(self.value(centers).numel(), b, "centers length");
        let hw = h * w;
        let pv = self.value(probs).data();
        let cv = self.value(centers).data();
        let mut out = vec![0.0f32; hw];
        for (bi, &cb) in cv.iter().enumerate() {
            let row = &pv[bi * hw..(bi + 1) * hw];
            for (o, &p) in out.iter_mut().zip(row.iter()) {
                *o += p * cb;
            }
        }
        let t = Tensor::from_raw(vec![1, h, w], out);
        let rg = self.req(probs) || self.req(centers);
        self.push(Op::ExpectBins { probs, centers }, t, rg)
    }

    // ---- backward ----

    pub fn backward(&mut self, loss: Var) -> Grads {
        assert_eq!(self.value(loss).numel(), 1, "backward expects scalar loss");
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..self.nodes.len()).rev() {
            if grads[i].is_none() || !self.nodes[i].requires_grad {
                continue;
            }
            let dy = grads[i].take().unwrap();
            self.accumulate(i, &dy, &mut grads);
            grads[i] = Some(dy);
        }
        Grads { by_index: grads }
    }

    /// Gradients of trainable registered parameters, by name.
    pub fn param_grads(&self, grads: &Grads) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (name, var, trainable) in &self.params {
            if *trainable {
                if let Some(g) = grads.wrt(*var) {
                    out.insert(name.clone(), g.clone());
                }
            }
        }
        out
    }

    fn accumulate(&self, i: usize, dy: &Tensor, grads: &mut [Option<Tensor>]) {
        let mut add_to = |v: Var, g: Tensor, nodes: &Vec<Node>| {
            if !nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => {
                    let sum = acc.add(&g).expect("grad accumulation shape");
                    *acc = sum;
                }
                slot => *slot = Some(g),
            }
        };
        let nodes = &self.nodes;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                add_to(*a, dy.clone(), nodes);
                add_to(*b, dy.clone(), nodes);
            }
            Op::Sub(a, b) => {
                add_to(*a, dy.clone(), nodes);
                add_to(*b, dy.scale(-1.0), nodes);
            }
            Op::Mul(a, b) => {
                add_to(*a, dy.zip_map(&nodes[b.0].value, |g, v| g * v).unwrap(), nodes);
                add_to(*b, dy.zip_map(&nodes[a.0].value, |g, v| g * v).unwrap(), nodes);
            }
            Op::Scale(a, c) => add_to(*a, dy.scale(*c), nodes),
            Op::AddConst(a) => add_to(*a, dy.clone(), nodes),
            Op::Exp(a) => add_to(*a, dy.zip_map(&nodes[i].value, |g, y| g * y).unwrap(), nodes),
            Op::Ln(a) => add_to(*a, dy.zip_map(&nodes[a.0].value, |g, x| g / x).unwrap(), nodes),
            Op::Sqrt(a) => add_to(
                *a,
                dy.zip_map(&nodes[i].value, |g, y| g * 0.5 / y.max(1e-12)).unwrap(),
                nodes,
            ),
            Op::Sigmoid(a) => add_to(
                *a,
                dy.zip_map(&nodes[i].value, |g, y| g * y * (1.0 - y)).unwrap(),
                nodes,
            ),
            Op::Gelu(a) => add_to(
                *a,
                dy.zip_map(&nodes[a.0].value, |g, x| g * gelu_grad(x)).unwrap(),
                nodes,
            ),
            Op::AddBias { x, b } => {
                add_to(*x, dy.clone(), nodes);
                if nodes[b.0].requires_grad {
                    let (c, h, w) = dy.chw().unwrap();
                    let hw = h * w;
                    let g: Vec<f32> = (0..c)
                        .map(|ci| dy.data()[ci * hw..(ci + 1) * hw].iter().sum())
                        .collect();
                    add_to(*b, Tensor::from_raw(vec![c], g), nodes);
                }
            }
            Op::Linear { x, w, b } => {
                let wd = nodes[w.0].value.dims();
                let (m, n) = (wd[0], wd[1]);
                if nodes[x.0].requires_grad {
                    let mut gx = vec![0.0f32; n];
                    let wm = nodes[w.0].value.data();
                    for mi in 0..m {
                        axpy(&mut gx, dy.data()[mi], &wm[mi * n..(mi + 1) * n]);
                    }
                    add_to(*x, Tensor::from_raw(vec![n], gx), nodes);
                }
                if nodes[w.0].requires_grad {
                    let xv = nodes[x.0].value.data();
                    let mut gw = vec![0.0f32; m * n];
                    for mi in 0..m {
                        axpy(&mut gw[mi * n..(mi + 1) * n], dy.data()[mi], xv);
                    }
                    add_to(*w, Tensor::from_raw(vec![m, n], gw), nodes);
                }
                add_to(*b, dy.clone(), nodes);
            }
            Op::MatMul(a, b) => {
                let (m, k) = (nodes[a.0].value.dims()[0], nodes[a.0].value.dims()[1]);
                let n = nodes[b.0].value.dims()[1];
                if nodes[a.0].requires_grad {
                    let mut ga = vec![0.0f32; m * k];
                    matmul_nt(dy.data(), m, n, nodes[b.0].value.data(), k, &mut ga);
                    add_to(*a, Tensor::from_raw(vec![m, k], ga), nodes);
                }
                if nodes[b.0].requires_grad {
                    let mut gb = vec![0.0f32; k * n];
                    matmul_tn(nodes[a.0].value.data(), m, k, dy.data(), n, &mut gb);
                    add_to(*b, Tensor::from_raw(vec![k, n], gb), nodes);
                }
            }
            Op::Transpose2d(a) => {
                let (m, n) = (dy.dims()[0], dy.dims()[1]);
                add_to(*a, Tensor::from_raw(vec![n, m], transpose(dy.data(), m, n)), nodes);
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                self.conv_backward(i, *x, *w, *b, *stride, *pad, dy, &mut add_to);
            }
            Op::SoftmaxRows(a) => {
                let (m, n) = (dy.dims()[0], dy.dims()[1]);
                let y = nodes[i].value.data();
                let mut gx = vec![0.0f32; m * n];
                for r in 0..m {
                    let yr = &y[r * n..(r + 1) * n];
                    let gr = &dy.data()[r * n..(r + 1) * n];
                    let dot_gy: f32 = yr.iter().zip(gr.iter()).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        gx[r * n + j] = yr[j] * (gr[j] - dot_gy);
                    }
                }
                add_to(*a, Tensor::from_raw(vec![m, n], gx), nodes);
            }
            Op::SoftmaxChannels(a) => {
                let dims = nodes[i].value.dims().to_vec();
                let (c, hw) = channels_layout(&dims);
                let y = nodes[i].value.data();
                let mut gx = vec![0.0f32; y.len()];
                for p in 0..hw {
                    let mut dot_gy = 0.0f32;
                    for ci in 0..c {
                        dot_gy += y[ci * hw + p] * dy.data()[ci * hw + p];
                    }
                    for ci in 0..c {
                        gx[ci * hw + p] = y[ci * hw + p] * (dy.data()[ci * hw + p] - dot_gy);
                    }
                }
                add_to(*a, Tensor::from_raw(dims, gx), nodes);
            }
            Op::LayerNormRows { x, gamma, beta } => {
                let xd = nodes[x.0].value.dims().to_vec();
                let (m, n) = (xd[0], xd[1]);
                let src = nodes[x.0].value.data();
                let g = nodes[gamma.0].value.data();
                let mut gx = vec![0.0f32; m * n];
                let mut gg = vec![0.0f32; n];
                let mut gb = vec![0.0f32; n];
                for r in 0..m {
                    let row = &src[r * n..(r + 1) * n];
                    let dyr = &dy.data()[r * n..(r + 1) * n];
                    let mean = row.iter().sum::<f32>() / n as f32;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n as f32;
                    let inv = 1.0 / (var + LN_EPS).sqrt();
                    let mut mean_dxh = 0.0f32;
                    let mut mean_dxh_xh = 0.0f32;
                    for j in 0..n {
                        let xh = (row[j] - mean) * inv;
                        let dxh = dyr[j] * g[j];
                        mean_dxh += dxh;
                        mean_dxh_xh += dxh * xh;
                        gg[j] += dyr[j] * xh;
                        gb[j] += dyr[j];
                    }
                    mean_dxh /= n as f32;
                    mean_dxh_xh /= n as f32;
                    for j in 0..n {
                        let xh = (row[j] - mean) * inv;
                        gx[r * n + j] = inv * (dyr[j] * g[j] - mean_dxh - xh * mean_dxh_xh);
                    }
                }
                add_to(*x, Tensor::from_raw(vec![m, n], gx), nodes);
                add_to(*gamma, Tensor::from_raw(vec![n], gg), nodes);
                add_to(*beta, Tensor::from_raw(vec![n], gb), nodes);
            }
            Op::ChannelNorm(x) => {
                let (c, h, w) = nodes[x.0].value.chw().unwrap();
                let hw = h * w;
                let src = nodes[x.0].value.data();
                let y = nodes[i].value.data();
                let mut gx = vec![0.0f32; c * hw];
                for p in 0..hw {
                    let mut mean = 0.0f32;
                    for ci in 0..c {
                        mean += src[ci * hw + p];
                    }
                    mean /= c as f32;
                    let mut var = 0.0f32;
                    for ci in 0..c {
                        let d = src[ci * hw + p] - mean;
                        var += d * d;
                    }
                    var /= c as f32;
                    let inv = 1.0 / (var + LN_EPS).sqrt();
                    let mut mean_dy = 0.0f32;
                    let mut mean_dy_y = 0.0f32;
                    for ci in 0..c {
                        mean_dy += dy.data()[ci * hw + p];
                        mean_dy_y += dy.data()[ci * hw + p] * y[ci * hw + p];
                    }
                    mean_dy /= c as f32;
                    mean_dy_y /= c as f32;
                    for ci in 0..c {
                        gx[ci * hw + p] =
                            inv * (dy.data()[ci * hw + p] - mean_dy - y[ci * hw + p] * mean_dy_y);
                    }
                }
                add_to(*x, Tensor::from_raw(vec![c, h, w], gx), nodes);
            }
            Op::SumAll(a) => {
                let g = dy.data()[0];
                let src_dims = nodes[a.0].value.dims().to_vec();
                add_to(*a, Tensor::full(&src_dims, g), nodes);
            }
            Op::GlobalAvgPool(a) => {
                let (c, h, w) = nodes[a.0].value.chw().unwrap();
                let hw = h * w;
                let mut gx = vec![0.0f32; c * hw];
                for ci in 0..c {
                    let g = dy.data()[ci] / hw as f32;
                    gx[ci * hw..(ci + 1) * hw].fill(g);
                }
                add_to(*a, Tensor::from_raw(vec![c, h, w], gx), nodes);
            }
            Op::PixelShuffle(a, r) => {
                add_to(*a, space_to_depth(dy, *r).unwrap(), nodes);
            }
            Op::SpaceToDepth(a, r) => {
                add_to(*a, pixel_shuffle(dy, *r).unwrap(), nodes);
            }
            Op::ConcatC(a, b) => {
                let (ca, h, w) = nodes[a.0].value.chw().unwrap();
                let hw = h * w;
                let (cb, _, _) = nodes[b.0].value.chw().unwrap();
                add_to(
                    *a,
                    Tensor::from_raw(vec![ca, h, w], dy.data()[..ca * hw].to_vec()),
                    nodes,
                );
                add_to(
                    *b,
                    Tensor::from_raw(vec![cb, h, w], dy.data()[ca * hw..].to_vec()),
                    nodes,
                );
            }
            Op::SliceC { x, from, to } => {
                let (c, h, w) = nodes[x.0].value.chw().unwrap();
                let hw = h * w;
                let mut gx = vec![0.0f32; c * hw];
                gx[from * hw..to * hw].copy_from_slice(dy.data());
                add_to(*x, Tensor::from_raw(vec![c, h, w], gx), nodes);
            }
            Op::Reshape(x) => {
                let xd = nodes[x.0].value.dims().to_vec();
                add_to(*x, Tensor::from_raw(xd, dy.data().to_vec()), nodes);
            }
            Op::UpsampleBilinear(x, r) => {
                let (c, h, w) = nodes[x.0].value.chw().unwrap();
                let (ho, wo) = (h * r, w * r);
                let mut gx = vec![0.0f32; c * h * w];
                for oy in 0..ho {
                    let (y0, y1, fy) = src_coords(oy, *r, h);
                    for ox in 0..wo {
                        let (x0, x1, fx) = src_coords(ox, *r, w);
                        for ci in 0..c {
                            let g = dy.data()[(ci * ho + oy) * wo + ox];
                            let base = ci * h * w;
                            gx[base + y0 * w + x0] += g * (1.0 - fy) * (1.0 - fx);
                            gx[base + y0 * w + x1] += g * (1.0 - fy) * fx;
                            gx[base + y1 * w + x0] += g * fy * (1.0 - fx);
                            gx[base + y1 * w + x1] += g * fy * fx;
                        }
                    }
                }
                add_to(*x, Tensor::from_raw(vec![c, h, w], gx), nodes);
            }
            Op::DeformSample { feat, offsets, weights } => {
                let (c, h, w) = nodes[feat.0].value.chw().unwrap();
                let k = nodes[weights.0].value.dims()[0];
                let hw = h * w;
                let fv = nodes[feat.0].value.data();
                let off = nodes[offsets.0].value.data();
                let wv = nodes[weights.0].value.data();
                let mut gfeat = vec![0.0f32; c * hw];
                let mut goff = vec![0.0f32; 2 * k * hw];
                let mut gw = vec![0.0f32; k * hw];
                for y in 0..h {
                    for x in 0..w {
                        let p = y * w + x;
                        for j in 0..k {
                            let py = y as f32 + off[(2 * j) * hw + p];
                            let px = x as f32 + off[(2 * j + 1) * hw + p];
                            let wj = wv[j * hw + p];
                            let s = BilinearTap::at(py, px, h, w);
                            let mut dval_dw = 0.0f32;
                            let mut dpy_acc = 0.0f32;
                            let mut dpx_acc = 0.0f32;
                            for ci in 0..c {
                                let g = dy.data()[ci * hw + p];
                                let fc = &fv[ci * hw..(ci + 1) * hw];
                                dval_dw += g * s.read(fc, w);
                                let gw_j = g * wj;
                                s.scatter(&mut gfeat[ci * hw..(ci + 1) * hw], w, gw_j);
                                let (dv_dy, dv_dx) = s.coord_grad(fc, w);
                                dpy_acc += gw_j * dv_dy;
                                dpx_acc += gw_j * dv_dx;
                            }
                            gw[j * hw + p] += dval_dw;
                            goff[(2 * j) * hw + p] += dpy_acc;
                            goff[(2 * j + 1) * hw + p] += dpx_acc;
                        }
                    }
                }
                add_to(*feat, Tensor::from_raw(vec![c, h, w], gfeat), nodes);
                add_to(*offsets, Tensor::from_raw(vec![2 * k, h, w], goff), nodes);
                add_to(*weights, Tensor::from_raw(vec![k, h, w], gw), nodes);
            }
            Op::CumsumVec(x) => {
                let n = dy.numel();
                let mut gx = vec![0.0f32; n];
                let mut acc = 0.0f32;
                for j in (0..n).rev() {
                    acc += dy.data()[j];
                    gx[j] = acc;
                }
                add_to(*x, Tensor::from_raw(vec![n], gx), nodes);
            }
            Op::ExpectBins { probs, centers } => {
                let (b, h, w) = nodes[probs.0].value.chw().unwrap();
                let hw = h * w;
                let cv = nodes[centers.0].value.data();
                let pv = nodes[probs.0].value.data();
                if nodes[probs.0].requires_grad {
                    let mut gp = vec![0.0f32; b * hw];
                    for bi in 0..b {
                        axpy(&mut gp[bi * hw..(bi + 1) * hw], cv[bi], dy.data());
                    }
                    add_to(*probs, Tensor::from_raw(vec![b, h, w], gp), nodes);
                }
                if nodes[centers.0].requires_grad {
                    let gc: Vec<f32> = (0..b)
                        .map(|bi| dot(&pv[bi * hw..(bi + 1) * hw], dy.data()))
                        .collect();
                    add_to(*centers, Tensor::from_raw(vec![b], gc), nodes);
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_backward(
        &self,
        node: usize,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
        dy: &Tensor,
        add_to: &mut impl FnMut(Var, Tensor, &Vec<Node>),
    ) {
        let nodes = &self.nodes;
        let (cin, h, wi) = nodes[x.0].value.chw().unwrap();
        let wd = nodes[w.0].value.dims();
        let (cout, kh, kw) = (wd[0], wd[2], wd[3]);
        let (hout, wout) = (dy.dims()[1], dy.dims()[2]);
        let k = cin * kh * kw;
        let n = hout * wout;
        if nodes[b.0].requires_grad {
            let gb: Vec<f32> = (0..cout)
                .map(|m| dy.data()[m * n..(m + 1) * n].iter().sum())
                .collect();
            add_to(b, Tensor::from_raw(vec![cout], gb), nodes);
        }
        if nodes[w.0].requires_grad {
            let col = nodes[node]
                .col_cache
                .as_deref()
                .expect("conv col cache present when weight needs grad");
            // dW = dY * col^T, run as an NN product against the transposed
            // column matrix so the inner loops stay long and contiguous
            let col_t = transpose(col, k, n);
            let mut gw = vec![0.0f32; cout * k];
            matmul_nn(dy.data(), cout, n, &col_t, k, &mut gw);
            add_to(w, Tensor::from_raw(wd.to_vec(), gw), nodes);
        }
        if nodes[x.0].requires_grad {
            // dX_col = W^T * dY, again via a transpose plus NN product
            let w_t = transpose(nodes[w.0].value.data(), cout, k);
            let mut gcol = vec![0.0f32; k * n];
            matmul_nn(&w_t, k, cout, dy.data(), n, &mut gcol);
            let gx = col2im(&gcol, cin, h, wi, kh, kw, stride, pad, hout, wout);
            add_to(x, Tensor::from_raw(vec![cin, h, wi], gx), nodes);
        }
    }
}

const LN_EPS: f32 = 1e-5;

fn channels_layout(dims: &[usize]) -> (usize, usize) {
    match dims {
        [b] => (*b, 1),
        [c, h, w] => (*c, h * w),
        other => panic!("softmax_channels expects 1-d or 3-d, got {other:?}"),
    }
}

pub fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)
const GELU_A: f32 = 0.044_715;

pub fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f32) -> f32 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn softmax_inplace(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// Source coordinates for integer-factor bilinear upsampling
/// (half-pixel centers, clamped to the border).
fn src_coords(o: usize, r: usize, size: usize) -> (usize, usize, f32) {
    let s = (o as f32 + 0.5) / r as f32 - 0.5;
    let s = s.max(0.0);
    let i0 = (s.floor() as usize).min(size - 1);
    let i1 = (i0 + 1).min(size - 1);
    let f = (s - i0 as f32).clamp(0.0, 1.0);
    (i0, i1, f)
}

/// One bilinear sample location with clamp-to-edge semantics.
#[derive(Clone, Copy)]
struct BilinearTap {
    y0: usize,
    y1: usize,
    x0: usize,
    x1: usize,
    fy: f32,
    fx: f32,
}

impl BilinearTap {
    fn at(py: f32, px: f32, h: usize, w: usize) -> Self {
        let fy0 = py.floor();
        let fx0 = px.floor();
        let fy = py - fy0;
        let fx = px - fx0;
        let clampi = |v: f32, hi: usize| -> usize {
            if v < 0.0 {
                0
            } else if v as usize >= hi {
                hi - 1
            } else {
                v as usize
            }
        };
        Self {
            y0: clampi(fy0, h),
            y1: clampi(fy0 + 1.0, h),
            x0: clampi(fx0, w),
            x1: clampi(fx0 + 1.0, w),
            fy,
            fx,
        }
    }

    fn read(&self, plane: &[f32], w: usize) -> f32 {
        (1.0 - self.fy) * (1.0 - self.fx) * plane[self.y0 * w + self.x0]
            + (1.0 - self.fy) * self.fx * plane[self.y0 * w + self.x1]
            + self.fy * (1.0 - self.fx) * plane[self.y1 * w + self.x0]
            + self.fy * self.fx * plane[self.y1 * w + self.x1]
    }

    fn scatter(&self, plane: &mut [f32], w: usize, g: f32) {
        plane[self.y0 * w + self.x0] += g * (1.0 - self.fy) * (1.0 - self.fx);
        plane[self.y0 * w + self.x1] += g * (1.0 - self.fy) * self.fx;
        plane[self.y1 * w + self.x0] += g * self.fy * (1.0 - self.fx);
        plane[self.y1 * w + self.x1] += g * self.fy * self.fx;
    }

    /// d(sample)/d(py), d(sample)/d(px).
    fn coord_grad(&self, plane: &[f32], w: usize) -> (f32, f32) {
        let v00 = plane[self.y0 * w + self.x0];
        let v01 = plane[self.y0 * w + self.x1];
        let v10 = plane[self.y1 * w + self.x0];
        let v11 = plane[self.y1 * w + self.x1];
        let dy = (1.0 - self.fx) * (v10 - v00) + self.fx * (v11 - v01);
        let dx = (1.0 - self.fy) * (v01 - v00) + self.fy * (v11 - v10);
        (dy, dx)
    }
}

// ---- flat kernels ----

#[inline]
fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f32; 8];
    let chunks = a.len() / 8;
    for i in 0..chunks {
        for l in 0..8 {
            acc[l] += a[i * 8 + l] * b[i * 8 + l];
        }
    }
    let mut s: f32 = acc.iter().sum();
    for i in chunks * 8..a.len() {
        s += a[i] * b[i];
    }
    s
}

#[inline]
fn axpy(out: &mut [f32], a: f32, x: &[f32]) {
    debug_assert_eq!(out.len(), x.len());
    for (o, &v) in out.iter_mut().zip(x.iter()) {
        *o += a * v;
    }
}

/// C(M,N) = A(M,K) * B(K,N), overwriting C.
pub(crate) fn matmul_nn(a: &[f32], m: usize, k: usize, b: &[f32], n: usize, c: &mut [f32]) {
    c.fill(0.0);
    matmul_nn_acc(a, m, k, b, n, c);
}

/// C(M,N) += A(M,K) * B(K,N).
pub(crate) fn matmul_nn_acc(a: &[f32], m: usize, k: usize, b: &[f32], n: usize, c: &mut [f32]) {
    for mi in 0..m {
        let crow = &mut c[mi * n..(mi + 1) * n];
        for ki in 0..k {
            let av = a[mi * k + ki];
            if av != 0.0 {
                axpy(crow, av, &b[ki * n..(ki + 1) * n]);
            }
        }
    }
}

/// C(K,N) = A(M,K)^T * B(M,N).
pub(crate) fn matmul_tn(a: &[f32], m: usize, k: usize, b: &[f32], n: usize, c: &mut [f32]) {
    c.fill(0.0);
    for mi in 0..m {
        let brow = &b[mi * n..(mi + 1) * n];
        for ki in 0..k {
            let av = a[mi * k + ki];
            if av != 0.0 {
                axpy(&mut c[ki * n..(ki + 1) * n], av, brow);
            }
        }
    }
}

/// C(M,K) = A(M,N) * B(K,N)^T.
pub(crate) fn matmul_nt(a: &[f32], m: usize, n: usize, b: &[f32], k: usize, c: &mut [f32]) {
    for mi in 0..m {
        let arow = &a[mi * n..(mi + 1) * n];
        for ki in 0..k {
            c[mi * k + ki] = dot(arow, &b[ki * n..(ki + 1) * n]);
        }
    }
}

fn transpose(a: &[f32], m: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f32],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    hout: usize,
    wout: usize,
) -> Vec<f32> {
    let n = hout * wout;
    let mut col = vec![0.0f32; cin * kh * kw * n];
    for ci in 0..cin {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let krow = &mut col[((ci * kh + ky) * kw + kx) * n..((ci * kh + ky) * kw + kx + 1) * n];
                for oy in 0..hout {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let dst = &mut krow[oy * wout..(oy + 1) * wout];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            *d = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    col
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    col: &[f32],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    hout: usize,
    wout: usize,
) -> Vec<f32> {
    let n = hout * wout;
    let mut x = vec![0.0f32; cin * h * w];
    for ci in 0..cin {
        let plane = &mut x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let krow = &col[((ci * kh + ky) * kw + kx) * n..((ci * kh + ky) * kw + kx + 1) * n];
                for oy in 0..hout {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let src = &krow[oy * wout..(oy + 1) * wout];
                    for (ox, &s) in src.iter().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst_row[ix as usize] += s;
                        }
                    }
                }
            }
        }
    }
    x
}
