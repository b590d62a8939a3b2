//! Auxiliary-view low-level feature enhancement: aligns the auxiliary view's
//! low-level features to the main view with learned-offset bilinear sampling
//! (9 points on a 3x3 base pattern, sigmoid modulation), fuses with two 3x3
//! convolutions, and adds the result onto the main feature. The fusion's
//! closing conv starts at zero, so an untrained module leaves the pipeline
//! untouched, and `off` mode short-circuits entirely.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, ConvPair};
use crate::params::ParameterStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum AvlfeMode {
    #[default]
    Off,
    Compatible,
    Full,
}

impl std::fmt::Display for AvlfeMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AvlfeMode::Off => write!(f, "off"),
            AvlfeMode::Compatible => write!(f, "compatible"),
            AvlfeMode::Full => write!(f, "full"),
        }
    }
}

pub const SAMPLE_POINTS: usize = 9;

/// One enhancement module for one skip level.
#[derive(Debug, Clone)]
pub struct AvlfeModule {
    offsets: Conv2d,
    fusion: ConvPair,
    channels: usize,
}

impl AvlfeModule {
    pub fn init(
        store: &mut ParameterStore,
        prefix: &str,
        channels: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        // zero-init: predicted offsets start on the identity 3x3 pattern and
        // modulation at sigmoid(0) = 0.5
        let offsets = Conv2d::init(
            store,
            &format!("{prefix}.offsets"),
            3 * SAMPLE_POINTS,
            2 * channels,
            3,
            1,
            1,
            true,
            rng,
        )?;
        let fusion = ConvPair::init(store, &format!("{prefix}.fusion"), channels, channels, channels, true, rng)?;
        Ok(Self { offsets, fusion, channels })
    }

    /// The fixed 3x3 neighborhood pattern added to the predicted offsets,
    /// as a (2k, H, W) tensor of constant planes.
    fn base_pattern(h: usize, w: usize) -> Tensor {
        let hw = h * w;
        let mut data = vec![0.0f32; 2 * SAMPLE_POINTS * hw];
        for j in 0..SAMPLE_POINTS {
            let dy = (j / 3) as f32 - 1.0;
            let dx = (j % 3) as f32 - 1.0;
            data[(2 * j) * hw..(2 * j + 1) * hw].fill(dy);
            data[(2 * j + 1) * hw..(2 * j + 2) * hw].fill(dx);
        }
        Tensor::from_raw(vec![2 * SAMPLE_POINTS, h, w], data)
    }

    /// Aligned-and-fused enhancement of the main-view feature.
    pub fn forward_g(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        f_main: Var,
        f_aux: Var,
    ) -> Result<Var> {
        let (cm, h, w) = g.value(f_main).chw()?;
        let (ca, ha, wa) = g.value(f_aux).chw()?;
        if cm != self.channels || ca != cm || ha != h || wa != w {
            return Err(Error::ShapeMismatch(format!(
                "avlfe expects matching ({},H,W) features, got {cm}x{h}x{w} vs {ca}x{ha}x{wa}",
                self.channels
            )));
        }
        let both = g.concat_c(f_main, f_aux);
        let raw = self.offsets.forward(g, store, both)?;
        let learned = g.slice_c(raw, 0, 2 * SAMPLE_POINTS);
        let base = g.input(Self::base_pattern(h, w));
        let offsets = g.add(learned, base);
        let w_raw = g.slice_c(raw, 2 * SAMPLE_POINTS, 3 * SAMPLE_POINTS);
        let weights = g.sigmoid(w_raw);
        let sampled = g.deform_sample(f_aux, offsets, weights);
        let aligned = g.gelu(sampled);
        let fused = self.fusion.forward(g, store, aligned)?;
        Ok(g.add(f_main, fused))
    }
}

/// The pair of modules replacing both low-level shortcuts.
#[derive(Debug, Clone)]
pub struct AvlfePair {
    pub l1: AvlfeModule,
    pub l2: AvlfeModule,
}

impl AvlfePair {
    pub fn init(
        store: &mut ParameterStore,
        c1: usize,
        c2: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Self {
            l1: AvlfeModule::init(store, "avlfe.l1", c1, rng)?,
            l2: AvlfeModule::init(store, "avlfe.l2", c2, rng)?,
        })
    }
}

/// Module-level operation with the `off` short-circuit: returns the main
/// feature untouched (bitwise) when no enhancement is requested.
pub fn avlfe_forward(
    module: &AvlfeModule,
    store: &ParameterStore,
    mode: AvlfeMode,
    f_main: &Tensor,
    f_aux: &Tensor,
) -> Result<Tensor> {
    if mode == AvlfeMode::Off {
        return Ok(f_main.clone());
    }
    let mut g = Graph::new();
    let fm = g.input(f_main.clone());
    let fa = g.input(f_aux.clone());
    let out = module.forward_g(&mut g, store, fm, fa)?;
    Ok(g.value(out).clone())
}
