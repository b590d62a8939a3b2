//! Pipeline assembly: wires the encoder, the swappable decoder block, the
//! fusion tail, the bins head, the restoration networks, and the
//! auxiliary-view modules into one parameter store, and provides the
//! end-to-end forward paths (baseline, diffusion inference, in-graph
//! restoration for fully-trainable fine-tuning).

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::avlfe::{AvlfeMode, AvlfePair};
use crate::depthnet::{
    BinsHead, DecoderBlock, DecoderTail, DecoderVariant, DepthMap, Encoder, EncoderFeatures,
    ModelShape,
};
use crate::diffusion::{
    restore, HighFeatures, Level, RestorationNet, RestorationTrace, Restorer, RestoreOptions,
};
use crate::error::{Error, Result};
use crate::params::ParameterStore;
use crate::rng;
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;

/// Everything needed to rebuild a pipeline around a checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDescriptor {
    pub shape: ModelShape,
    pub variant: DecoderVariant,
}

#[derive(Debug, Clone)]
pub struct DepthPipeline {
    pub shape: ModelShape,
    pub encoder: Encoder,
    pub block: DecoderBlock,
    pub tail: DecoderTail,
    pub bins: BinsHead,
    pub restorer: Restorer,
    pub avlfe: AvlfePair,
}

/// In-graph outputs of the decode path.
pub struct DecodeVars {
    pub depth_full: Var,
    pub probs: Var,
    pub centers: Var,
}

impl DepthPipeline {
    /// Fresh pipeline; inserts every parameter into `store`.
    pub fn init(
        store: &mut ParameterStore,
        shape: &ModelShape,
        variant: DecoderVariant,
        seed: u64,
    ) -> Result<Self> {
        let mut r = rng::stream(seed, "model-init", 0);
        let encoder = Encoder::init(store, shape, &mut r)?;
        let block = DecoderBlock::init(store, shape, variant, &mut r)?;
        let tail = DecoderTail::init(store, shape, &mut r)?;
        let bins = BinsHead::init(store, shape, &mut r)?;
        let [c1, c2, c3, c4] = shape.enc_channels;
        let restorer = Restorer {
            l3: RestorationNet::init(
                store,
                "rnet.l3",
                c3,
                c4 / 4,
                shape.trunk_width,
                shape.time_embed_dim,
                shape.trunk_blocks,
                &mut r,
            )?,
            l4: RestorationNet::init(
                store,
                "rnet.l4",
                c4,
                c3 * 4,
                shape.trunk_width,
                shape.time_embed_dim,
                shape.trunk_blocks,
                &mut r,
            )?,
        };
        let avlfe = AvlfePair::init(store, c1, c2, &mut r)?;
        Ok(Self { shape: shape.clone(), encoder, block, tail, bins, restorer, avlfe })
    }

    /// Rebuilds the pipeline around checkpointed parameters; the parameter
    /// name sets must match exactly.
    pub fn from_store(desc: &ModelDescriptor, store: &ParameterStore) -> Result<Self> {
        let mut fresh = ParameterStore::new();
        let pipeline = Self::init(&mut fresh, &desc.shape, desc.variant, 0)?;
        let expect = fresh.names_sorted();
        let got = store.names_sorted();
        if expect != got {
            return Err(Error::Config(format!(
                "checkpoint parameter set does not match the descriptor \
                 ({} expected, {} found)",
                expect.len(),
                got.len()
            )));
        }
        for name in &expect {
            if fresh.get(name)?.dims() != store.get(name)?.dims() {
                return Err(Error::ShapeMismatch(format!("checkpoint shape of `{name}`")));
            }
        }
        Ok(pipeline)
    }

    pub fn variant(&self) -> DecoderVariant {
        self.block.variant()
    }

    /// Decode restored (or raw) high-level features plus low-level skips
    /// into a full-resolution depth map, in-graph.
    pub fn decode_g(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        f3: Var,
        f4: Var,
        f1: Var,
        f2: Var,
    ) -> Result<DecodeVars> {
        let up4 = g.pixel_shuffle(f4, 2);
        let merged = g.concat_c(up4, f3);
        let blk = self.block.forward(g, store, merged)?;
        let tail_feat = self.tail.forward(g, store, blk, f2, f1)?;
        let (probs, centers, depth_q) = self.bins.forward(g, store, tail_feat, f4)?;
        let depth_full = g.upsample_bilinear(depth_q, 4);
        Ok(DecodeVars { depth_full, probs, centers })
    }

    /// Plain-tensor decode with clamping into the valid range.
    pub fn decode_depth(
        &self,
        store: &ParameterStore,
        f3: &Tensor,
        f4: &Tensor,
        f1: &Tensor,
        f2: &Tensor,
    ) -> Result<DepthMap> {
        let mut g = Graph::new();
        let f3v = g.input(f3.clone());
        let f4v = g.input(f4.clone());
        let f1v = g.input(f1.clone());
        let f2v = g.input(f2.clone());
        let out = self.decode_g(&mut g, store, f3v, f4v, f1v, f2v)?;
        let depth = g
            .value(out.depth_full)
            .map(|v| v.clamp(self.shape.d_min, self.shape.d_max));
        DepthMap::new(depth, self.shape.d_min, self.shape.d_max)
    }

    /// Baseline (no-diffusion) forward: encode, decode the raw features.
    pub fn baseline_forward(&self, store: &ParameterStore, image: &Tensor) -> Result<DepthMap> {
        let f = self.encoder.encode(store, image)?;
        self.decode_depth(store, &f.f3, &f.f4, &f.f1, &f.f2)
    }

    /// Low-level skip features, optionally enhanced from the auxiliary view.
    pub fn low_level_features(
        &self,
        store: &ParameterStore,
        feats: &EncoderFeatures,
        mode: AvlfeMode,
        aux_image: Option<&Tensor>,
    ) -> Result<(Tensor, Tensor)> {
        if mode == AvlfeMode::Off {
            return Ok((feats.f1.clone(), feats.f2.clone()));
        }
        let aux = aux_image.ok_or_else(|| {
            Error::InvalidArg("auxiliary-view enhancement requested without an aux image".into())
        })?;
        let mut g = Graph::new();
        let aux_v = g.input(aux.clone());
        let (a1, a2) = self.encoder.encode_low_g(&mut g, store, aux_v)?;
        let f1v = g.input(feats.f1.clone());
        let f2v = g.input(feats.f2.clone());
        let e1 = self.avlfe.l1.forward_g(&mut g, store, f1v, a1)?;
        let e2 = self.avlfe.l2.forward_g(&mut g, store, f2v, a2)?;
        Ok((g.value(e1).clone(), g.value(e2).clone()))
    }

    /// Full diffusion inference: noise the high-level features, run the
    /// reverse process, decode with (optionally enhanced) skips.
    #[allow(clippy::too_many_arguments)]
    pub fn infer(
        &self,
        store: &ParameterStore,
        image: &Tensor,
        sched: &NoiseSchedule,
        steps: usize,
        seed: u64,
        opts: &RestoreOptions,
        avlfe_mode: AvlfeMode,
        aux_image: Option<&Tensor>,
    ) -> Result<(DepthMap, RestorationTrace)> {
        let feats = self.encoder.encode(store, image)?;
        let f_in = HighFeatures { l3: feats.f3.clone(), l4: feats.f4.clone() };
        let trace = restore(&self.restorer, store, &f_in, sched, steps, seed, opts)?;
        let (f1, f2) = self.low_level_features(store, &feats, avlfe_mode, aux_image)?;
        let fin = trace.final_features();
        let depth = self.decode_depth(store, &fin.l3, &fin.l4, &f1, &f2)?;
        Ok((depth, trace))
    }

    /// In-graph reverse process for paths that must differentiate through
    /// the whole restoration (fully-trainable fine-tuning).
    #[allow(clippy::too_many_arguments)]
    pub fn restore_g(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        f3_in: Var,
        f4_in: Var,
        sched: &NoiseSchedule,
        steps: usize,
        seed: u64,
        opts: &RestoreOptions,
    ) -> Result<(Var, Var)> {
        if steps > sched.steps() {
            return Err(Error::InvalidArg(format!(
                "{steps} strides exceed schedule length {}",
                sched.steps()
            )));
        }
        let total = sched.steps();
        let top = sched.alpha_bar(total) as f32;
        let e3 = crate::diffusion::restore_noise(seed, Level::L3, g.value(f3_in).dims());
        let e4 = crate::diffusion::restore_noise(seed, Level::L4, g.value(f4_in).dims());
        let e3 = g.input(e3.scale(top));
        let e4 = g.input(e4.scale(top));
        let mut f3 = g.add(f3_in, e3);
        let mut f4 = g.add(f4_in, e4);
        let (init3, init4) = (f3, f4);
        let plan = crate::diffusion::time_points(total, steps);
        for w in plan.windows(2) {
            let (t_hi, t_lo) = (w[0], w[1]);
            let (src3, src4) = if opts.fixed_conditions { (init3, init4) } else { (f3, f4) };
            let c3 = g.pixel_shuffle(src4, 2);
            let c4 = g.space_to_depth(src3, 2);
            let (deg3, eps3) = self.restorer.l3.predict_g(g, store, f3, t_hi, total, c3)?;
            let (deg4, eps4) = self.restorer.l4.predict_g(g, store, f4, t_hi, total, c4)?;
            let eps_coef = (sched.alpha_bar(t_hi) - sched.alpha_bar(t_lo)) as f32;
            let deg_coef = if opts.literal_removal {
                1.0
            } else {
                (sched.beta_bar(t_hi) - sched.beta_bar(t_lo)) as f32
            };
            let d3 = g.scale(deg3, deg_coef);
            let n3 = g.scale(eps3, eps_coef);
            let step3 = g.sub(f3, d3);
            f3 = g.sub(step3, n3);
            let d4 = g.scale(deg4, deg_coef);
            let n4 = g.scale(eps4, eps_coef);
            let step4 = g.sub(f4, d4);
            f4 = g.sub(step4, n4);
        }
        Ok((f3, f4))
    }

}

/// Stage identifiers for trainability control and checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Diffusion,
    Avlfe,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Stage::Pretrain => write!(f, "pretrain"),
            Stage::Diffusion => write!(f, "diffusion"),
            Stage::Avlfe => write!(f, "avlfe"),
        }
    }
}

/// Applies the stage freezing contract:
/// pretraining trains encoder, decoder block, tail, and bins; the diffusion
/// stage trains only the restoration nets and the decoder block; the
/// auxiliary stage trains only the enhancement modules (compatible) or
/// everything (full).
pub fn set_stage_trainability(
    store: &mut ParameterStore,
    stage: Stage,
    avlfe_mode: AvlfeMode,
    block_prefix: &str,
) {
    let all = ["enc.", "invdec.", "decblk.", "tail.", "bins.", "rnet.", "avlfe."];
    for p in all {
        store.set_trainable_prefix(p, false);
    }
    match stage {
        Stage::Pretrain => {
            store.set_trainable_prefix("enc.", true);
            store.set_trainable_prefix(block_prefix, true);
            store.set_trainable_prefix("tail.", true);
            store.set_trainable_prefix("bins.", true);
        }
        Stage::Diffusion => {
            store.set_trainable_prefix("rnet.", true);
            store.set_trainable_prefix(block_prefix, true);
        }
        Stage::Avlfe => match avlfe_mode {
            AvlfeMode::Compatible => {
                store.set_trainable_prefix("avlfe.", true);
            }
            AvlfeMode::Full | AvlfeMode::Off => {
                for p in all {
                    store.set_trainable_prefix(p, true);
                }
            }
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::{build_schedule, ScheduleKind};

    fn tiny_shape() -> ModelShape {
        ModelShape {
            enc_channels: [8, 16, 32, 64],
            stem_mid: 8,
            invdec_hidden: 8,
            trunk_width: 16,
            time_embed_dim: 16,
            trunk_blocks: 1,
            bins: 8,
            tail_width: 16,
            ..Default::default()
        }
    }

    #[test]
    fn baseline_forward_bounds_and_determinism() {
        let shape = tiny_shape();
        let mut store = ParameterStore::new();
        let p = DepthPipeline::init(&mut store, &shape, DecoderVariant::Inv, 1).unwrap();
        let img = rng::rand_uniform(&mut rng::stream(2, "img", 0), &[3, 32, 32], 0.0, 1.0);
        let d1 = p.baseline_forward(&store, &img).unwrap();
        let d2 = p.baseline_forward(&store, &img).unwrap();
        assert!(d1.values().bitwise_eq(d2.values()));
        assert_eq!(d1.values().dims(), &[1, 32, 32]);
        for &v in d1.values().data() {
            assert!((shape.d_min..=shape.d_max).contains(&v));
        }
    }

    #[test]
    fn infer_runs_and_matches_graph_restore() {
        let shape = tiny_shape();
        let mut store = ParameterStore::new();
        let p = DepthPipeline::init(&mut store, &shape, DecoderVariant::Inv, 3).unwrap();
        let img = rng::rand_uniform(&mut rng::stream(4, "img", 0), &[3, 32, 32], 0.0, 1.0);
        let sched = build_schedule(2, ScheduleKind::Linear).unwrap();
        let opts = RestoreOptions::default();
        let (depth, trace) = p.infer(&store, &img, &sched, 2, 9, &opts, AvlfeMode::Off, None).unwrap();
        assert_eq!(trace.points.len(), 3);
        assert_eq!(depth.values().dims(), &[1, 32, 32]);

        // graph-mode restore agrees with the tensor-mode sampler
        let feats = p.encoder.encode(&store, &img).unwrap();
        let mut g = Graph::new();
        let f3 = g.input(feats.f3.clone());
        let f4 = g.input(feats.f4.clone());
        let (r3, r4) = p.restore_g(&mut g, &store, f3, f4, &sched, 2, 9, &opts).unwrap();
        let fin = trace.final_features();
        assert!(g.value(r3).max_abs_diff(&fin.l3) < 1e-6);
        assert!(g.value(r4).max_abs_diff(&fin.l4) < 1e-6);
    }

    #[test]
    fn checkpoint_descriptor_roundtrip() {
        let shape = tiny_shape();
        let mut store = ParameterStore::new();
        let _ = DepthPipeline::init(&mut store, &shape, DecoderVariant::Conv, 5).unwrap();
        let desc = ModelDescriptor { shape: shape.clone(), variant: DecoderVariant::Conv };
        let rebuilt = DepthPipeline::from_store(&desc, &store).unwrap();
        assert_eq!(rebuilt.variant(), DecoderVariant::Conv);
        // variant mismatch rejected
        let bad = ModelDescriptor { shape, variant: DecoderVariant::Tf };
        assert!(DepthPipeline::from_store(&bad, &store).is_err());
    }

    #[test]
    fn stage_trainability_contract() {
        let shape = tiny_shape();
        let mut store = ParameterStore::new();
        let p = DepthPipeline::init(&mut store, &shape, DecoderVariant::Inv, 6).unwrap();
        set_stage_trainability(&mut store, Stage::Pretrain, AvlfeMode::Off, p.block.param_prefix());
        assert!(store.is_trainable("enc.stem1.w").unwrap());
        assert!(store.is_trainable("invdec.layer0.g1.c1.w").unwrap());
        assert!(!store.is_trainable("rnet.l3.input.w").unwrap());
        assert!(!store.is_trainable("avlfe.l1.offsets.w").unwrap());

        set_stage_trainability(&mut store, Stage::Diffusion, AvlfeMode::Off, p.block.param_prefix());
        assert!(!store.is_trainable("enc.stem1.w").unwrap());
        assert!(!store.is_trainable("bins.probs.w").unwrap());
        assert!(store.is_trainable("rnet.l4.deg.w").unwrap());
        assert!(store.is_trainable("invdec.layer2.h2.c2.w").unwrap());

        set_stage_trainability(&mut store, Stage::Avlfe, AvlfeMode::Compatible, p.block.param_prefix());
        let trainable = store.trainable_names();
        assert!(!trainable.is_empty());
        assert!(trainable.iter().all(|n| n.starts_with("avlfe.")));
    }

    #[test]
    fn avlfe_off_pipeline_identical_to_module_free_path() {
        let shape = tiny_shape();
        let mut store = ParameterStore::new();
        let p = DepthPipeline::init(&mut store, &shape, DecoderVariant::Inv, 7).unwrap();
        let img = rng::rand_uniform(&mut rng::stream(8, "img", 0), &[3, 32, 32], 0.0, 1.0);
        let aux = rng::rand_uniform(&mut rng::stream(8, "aux", 0), &[3, 32, 32], 0.0, 1.0);
        let feats = p.encoder.encode(&store, &img).unwrap();
        let (f1, f2) = p.low_level_features(&store, &feats, AvlfeMode::Off, Some(&aux)).unwrap();
        assert!(f1.bitwise_eq(&feats.f1));
        assert!(f2.bitwise_eq(&feats.f2));
        let via_decode = p.decode_depth(&store, &feats.f3, &feats.f4, &f1, &f2).unwrap();
        let via_baseline = p.baseline_forward(&store, &img).unwrap();
        assert!(via_decode.values().bitwise_eq(via_baseline.values()));
    }
}
