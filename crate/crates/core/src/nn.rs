//! Layer helpers shared by the networks: named conv / linear layers whose
//! parameters live in a [`ParameterStore`] and are bound into a [`Graph`]
//! per forward pass.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::params::ParameterStore;
use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: String,
    pub b: String,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        store: &mut ParameterStore,
        prefix: &str,
        cout: usize,
        cin: usize,
        k: usize,
        stride: usize,
        pad: usize,
        zero_init: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let w = format!("{prefix}.w");
        let b = format!("{prefix}.b");
        let weight = if zero_init {
            Tensor::zeros(&[cout, cin, k, k])
        } else {
            rng::init_conv_weight(rng, &[cout, cin, k, k])
        };
        store.insert(&w, weight, true)?;
        store.insert(&b, Tensor::zeros(&[cout]), true)?;
        Ok(Self { w, b, stride, pad })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParameterStore, x: Var) -> Result<Var> {
        let w = g.param(store, &self.w)?;
        let b = g.param(store, &self.b)?;
        Ok(g.conv2d(x, w, b, self.stride, self.pad))
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: String,
    pub b: String,
}

impl Linear {
    pub fn init(
        store: &mut ParameterStore,
        prefix: &str,
        out_features: usize,
        in_features: usize,
        zero_init: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let w = format!("{prefix}.w");
        let b = format!("{prefix}.b");
        let weight = if zero_init {
            Tensor::zeros(&[out_features, in_features])
        } else {
            let std = (1.0 / in_features as f32).sqrt();
            rng::randn(rng, &[out_features, in_features]).scale(std)
        };
        store.insert(&w, weight, true)?;
        store.insert(&b, Tensor::zeros(&[out_features]), true)?;
        Ok(Self { w, b })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParameterStore, x: Var) -> Result<Var> {
        let w = g.param(store, &self.w)?;
        let b = g.param(store, &self.b)?;
        Ok(g.linear(x, w, b))
    }
}

/// Two 3x3 convolutions with a GELU between; the closing conv may be
/// zero-initialized for identity-like starts.
#[derive(Debug, Clone)]
pub struct ConvPair {
    pub c1: Conv2d,
    pub c2: Conv2d,
}

impl ConvPair {
    pub fn init(
        store: &mut ParameterStore,
        prefix: &str,
        cin: usize,
        hidden: usize,
        cout: usize,
        zero_final: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let c1 = Conv2d::init(store, &format!("{prefix}.c1"), hidden, cin, 3, 1, 1, false, rng)?;
        let c2 = Conv2d::init(store, &format!("{prefix}.c2"), cout, hidden, 3, 1, 1, zero_final, rng)?;
        Ok(Self { c1, c2 })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParameterStore, x: Var) -> Result<Var> {
        let h = self.c1.forward(g, store, x)?;
        let h = g.gelu(h);
        self.c2.forward(g, store, h)
    }
}

/// Sinusoidal embedding of the normalized step t/T.
pub fn time_embedding(t: usize, total: usize, dim: usize) -> Tensor {
    assert!(dim.is_multiple_of(2), "time embedding dim must be even");
    let tau = t as f32 / total.max(1) as f32;
    let half = dim / 2;
    let mut data = Vec::with_capacity(dim);
    for i in 0..half {
        let freq = 10_000f32.powf(-(i as f32) / half as f32);
        data.push((tau * freq).sin());
    }
    for i in 0..half {
        let freq = 10_000f32.powf(-(i as f32) / half as f32);
        data.push((tau * freq).cos());
    }
    Tensor::from_raw(vec![dim], data)
}
