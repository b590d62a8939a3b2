//! Invertible decoder block built from affine coupling layers, with the
//! exact analytic inverse and an empirical bi-Lipschitz estimator.
//!
//! A coupling layer splits the channels at position `s`, rescales the first
//! partition by `exp(sigmoid(g2(second)))` plus a shift `h2(second)`, then
//! transforms the second partition conditioned on the already-updated first.
//! Every scale factor lies strictly in (1, e), so the inverse always exists
//! in closed form.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::ConvPair;
use crate::params::ParameterStore;
use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct CouplingLayer {
    channels: usize,
    split: usize,
    g1: ConvPair,
    g2: ConvPair,
    h1: ConvPair,
    h2: ConvPair,
}

impl CouplingLayer {
    /// Subnets map one partition's channels to the other's through two 3x3
    /// convolutions with a GELU; the closing conv starts at zero so a fresh
    /// layer is a pure `e^0.5` scaling.
    pub fn init(
        store: &mut ParameterStore,
        prefix: &str,
        channels: usize,
        hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if channels < 2 {
            return Err(Error::InvalidArg(format!(
                "coupling layer needs at least 2 channels, got {channels}"
            )));
        }
        let split = channels / 2;
        let first = split;
        let second = channels - split;
        let g1 = ConvPair::init(store, &format!("{prefix}.g1"), first, hidden, second, true, rng)?;
        let h1 = ConvPair::init(store, &format!("{prefix}.h1"), first, hidden, second, true, rng)?;
        let g2 = ConvPair::init(store, &format!("{prefix}.g2"), second, hidden, first, true, rng)?;
        let h2 = ConvPair::init(store, &format!("{prefix}.h2"), second, hidden, first, true, rng)?;
        Ok(Self { channels, split, g1, g2, h1, h2 })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn split(&self) -> usize {
        self.split
    }

    pub fn forward(&self, g: &mut Graph, store: &ParameterStore, x: Var) -> Result<Var> {
        let (c, _, _) = g.value(x).chw()?;
        if c != self.channels {
            return Err(Error::ShapeMismatch(format!(
                "coupling forward: {c} channels, layer built for {}",
                self.channels
            )));
        }
        let a_in = g.slice_c(x, 0, self.split);
        let b_in = g.slice_c(x, self.split, self.channels);

        let s2 = self.g2.forward(g, store, b_in)?;
        let s2 = g.sigmoid(s2);
        let s2 = g.exp(s2);
        let t2 = self.h2.forward(g, store, b_in)?;
        let a_scaled = g.mul(a_in, s2);
        let a_out = g.add(a_scaled, t2);

        let s1 = self.g1.forward(g, store, a_out)?;
        let s1 = g.sigmoid(s1);
        let s1 = g.exp(s1);
        let t1 = self.h1.forward(g, store, a_out)?;
        let b_scaled = g.mul(b_in, s1);
        let b_out = g.add(b_scaled, t1);

        Ok(g.concat_c(a_out, b_out))
    }

    /// Closed-form inverse: recovers the second partition first (its scale
    /// and shift depend only on the kept first partition), then the first.
    pub fn inverse(&self, g: &mut Graph, store: &ParameterStore, y: Var) -> Result<Var> {
        let (c, _, _) = g.value(y).chw()?;
        if c != self.channels {
            return Err(Error::ShapeMismatch(format!(
                "coupling inverse: {c} channels, layer built for {}",
                self.channels
            )));
        }
        let a_out = g.slice_c(y, 0, self.split);
        let b_out = g.slice_c(y, self.split, self.channels);

        let s1 = self.g1.forward(g, store, a_out)?;
        let s1 = g.sigmoid(s1);
        let neg_s1 = g.scale(s1, -1.0);
        let inv_s1 = g.exp(neg_s1);
        let t1 = self.h1.forward(g, store, a_out)?;
        let b_shift = g.sub(b_out, t1);
        let b_in = g.mul(b_shift, inv_s1);

        let s2 = self.g2.forward(g, store, b_in)?;
        let s2 = g.sigmoid(s2);
        let neg_s2 = g.scale(s2, -1.0);
        let inv_s2 = g.exp(neg_s2);
        let t2 = self.h2.forward(g, store, b_in)?;
        let a_shift = g.sub(a_out, t2);
        let a_in = g.mul(a_shift, inv_s2);

        Ok(g.concat_c(a_in, b_in))
    }

    /// The elementwise scale tensors exp(sigmoid(.)) applied in the forward
    /// pass, for invariant checks.
    pub fn scales(&self, store: &ParameterStore, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let b_in = g.slice_c(xv, self.split, self.channels);
        let s2 = self.g2.forward(&mut g, store, b_in)?;
        let s2 = g.sigmoid(s2);
        let s2 = g.exp(s2);
        let a_in = g.slice_c(xv, 0, self.split);
        let t2 = self.h2.forward(&mut g, store, b_in)?;
        let a_scaled = g.mul(a_in, s2);
        let a_out = g.add(a_scaled, t2);
        let s1 = self.g1.forward(&mut g, store, a_out)?;
        let s1 = g.sigmoid(s1);
        let s1 = g.exp(s1);
        Ok((g.value(s2).clone(), g.value(s1).clone()))
    }
}

/// Stack of coupling layers with exact inversion.
#[derive(Debug, Clone)]
pub struct InvertibleDecoder {
    layers: Vec<CouplingLayer>,
    channels: usize,
}

impl InvertibleDecoder {
    pub fn init(
        store: &mut ParameterStore,
        prefix: &str,
        channels: usize,
        hidden: usize,
        num_layers: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let mut layers = Vec::with_capacity(num_layers);
        for i in 0..num_layers {
            layers.push(CouplingLayer::init(
                store,
                &format!("{prefix}.layer{i}"),
                channels,
                hidden,
                rng,
            )?);
        }
        Ok(Self { layers, channels })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn layers(&self) -> &[CouplingLayer] {
        &self.layers
    }

    pub fn forward(&self, g: &mut Graph, store: &ParameterStore, x: Var) -> Result<Var> {
        let mut cur = x;
        for layer in &self.layers {
            cur = layer.forward(g, store, cur)?;
        }
        Ok(cur)
    }

    pub fn inverse(&self, g: &mut Graph, store: &ParameterStore, y: Var) -> Result<Var> {
        let mut cur = y;
        for layer in self.layers.iter().rev() {
            cur = layer.inverse(g, store, cur)?;
        }
        Ok(cur)
    }

    /// Plain-tensor forward for inference paths.
    pub fn forward_tensor(&self, store: &ParameterStore, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let y = self.forward(&mut g, store, xv)?;
        Ok(g.value(y).clone())
    }

    pub fn inverse_tensor(&self, store: &ParameterStore, y: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let yv = g.input(y.clone());
        let x = self.inverse(&mut g, store, yv)?;
        Ok(g.value(x).clone())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LipschitzEstimate {
    /// Largest observed output/input distance ratio.
    pub forward_k: f64,
    /// Largest observed input/output distance ratio.
    pub inverse_l: f64,
    pub pairs: usize,
}

/// Samples point pairs uniformly from `[lo, hi]^dims` and reports empirical
/// two-sided Lipschitz ratios of the decoder on that domain.
#[allow(clippy::too_many_arguments)]
pub fn estimate_bilipschitz(
    dec: &InvertibleDecoder,
    store: &ParameterStore,
    dims: &[usize],
    lo: f32,
    hi: f32,
    pairs: usize,
    seed: u64,
) -> Result<LipschitzEstimate> {
    if pairs < 2 {
        return Err(Error::InvalidArg("need at least 2 sample pairs".into()));
    }
    let mut k = 0.0f64;
    let mut l = 0.0f64;
    let mut used = 0usize;
    for i in 0..pairs {
        let mut r = rng::stream(seed, "bilipschitz", i as u64);
        let x1 = rng::rand_uniform(&mut r, dims, lo, hi);
        let x2 = rng::rand_uniform(&mut r, dims, lo, hi);
        let dx = x1.sub(&x2)?.norm_l2();
        if dx == 0.0 {
            continue;
        }
        let y1 = dec.forward_tensor(store, &x1)?;
        let y2 = dec.forward_tensor(store, &x2)?;
        let dy = y1.sub(&y2)?.norm_l2();
        if dy > 0.0 {
            k = k.max(dy / dx);
            l = l.max(dx / dy);
        }
        used += 1;
    }
    if used == 0 {
        return Err(Error::InvalidArg("all sampled pairs were degenerate".into()));
    }
    Ok(LipschitzEstimate { forward_k: k, inverse_l: l, pairs: used })
}
