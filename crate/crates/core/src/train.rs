//! Staged training: pretraining of the depth network, indirect diffusion
//! training through the sparse depth loss, and auxiliary-view enhancement
//! in compatible or fully-trainable form. Per-sample gradients are computed
//! in parallel and reduced in index order, so runs are bit-reproducible.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::avlfe::AvlfeMode;
use crate::depthnet::DepthMap;
use crate::diffusion::{build_conditions, Level, RestoreOptions};
use crate::error::{Error, Result};
use crate::metrics::{self, MetricsReport};
use crate::model::{set_stage_trainability, DepthPipeline, Stage};
use crate::params::ParameterStore;
use crate::rng;
use crate::schedule::{forward_noise, NoiseSchedule};
use crate::synthdata::{Dataset, DepthSample, Split};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainHyper {
    pub lr_pretrain: f32,
    pub lr_diffusion: f32,
    pub lr_avlfe: f32,
    pub batch: usize,
    pub epochs_pretrain: usize,
    pub epochs_diffusion: usize,
    pub epochs_avlfe: usize,
    /// Optional hard clip applied to decoder-block weights after each step.
    pub clip_weights: Option<f32>,
    /// Reverse strides used when training stages need a full restoration.
    pub avlfe_steps: usize,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self {
            lr_pretrain: 1e-3,
            lr_diffusion: 1e-4,
            lr_avlfe: 1e-4,
            batch: 8,
            epochs_pretrain: 2,
            epochs_diffusion: 3,
            epochs_avlfe: 1,
            clip_weights: None,
            avlfe_steps: 2,
        }
    }
}

/// Adam with bias correction; state keyed by parameter name.
pub struct Adam {
    pub lr: f32,
    beta1: f32,
    beta2: f32,
    eps: f32,
    m: BTreeMap<String, Vec<f32>>,
    v: BTreeMap<String, Vec<f32>>,
    t: i32,
}

impl Adam {
    pub fn new(lr: f32) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: BTreeMap::new(), v: BTreeMap::new(), t: 0 }
    }

    pub fn step(&mut self, store: &mut ParameterStore, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for (name, grad) in grads {
            if !store.is_trainable(name)? {
                return Err(Error::FrozenViolation(name.clone()));
            }
            let mut value = store.get(name)?.clone();
            let n = value.numel();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            for ((p, &g), (mi, vi)) in value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * g;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * g * g;
                let mh = *mi / bc1;
                let vh = *vi / bc2;
                *p -= self.lr * mh / (vh.sqrt() + self.eps);
            }
            store.update(name, value)?;
        }
        Ok(())
    }
}

/// Masked SiLog built from graph primitives so gradients come for free.
pub fn silog_loss_g(g: &mut Graph, pred: Var, gt: &Tensor, mask: &Tensor) -> Result<Var> {
    if g.value(pred).dims() != gt.dims() || gt.dims() != mask.dims() {
        return Err(Error::ShapeMismatch(format!(
            "silog graph: pred {:?} vs gt {:?} vs mask {:?}",
            g.value(pred).dims(),
            gt.dims(),
            mask.dims()
        )));
    }
    let n: f64 = mask.data().iter().map(|&m| if m > 0.0 { 1.0 } else { 0.0 }).sum();
    if n == 0.0 {
        return Err(Error::EmptyMask("silog_loss_g".into()));
    }
    let gt_v = g.input(gt.clone());
    let mask_v = g.input(mask.clone());
    let log_pred = g.ln(pred);
    let log_gt = g.ln(gt_v);
    let d = g.sub(log_pred, log_gt);
    let dm = g.mul(d, mask_v);
    let sq = g.mul(dm, dm);
    let sum_sq = g.sum_all(sq);
    let sum = g.sum_all(dm);
    let mean_sq = g.scale(sum_sq, (1.0 / n) as f32);
    let mean = g.scale(sum, (1.0 / n) as f32);
    let mean2 = g.mul(mean, mean);
    let penalty = g.scale(mean2, metrics::SILOG_LAMBDA as f32);
    let var_term = g.sub(mean_sq, penalty);
    // tiny epsilon keeps sqrt differentiable when pred == gt on the mask
    let guarded = g.add_const(var_term, 1e-12);
    let root = g.sqrt(guarded);
    Ok(g.scale(root, metrics::SILOG_SCALE as f32))
}

/// Per-sample loss graphs for each stage.
pub struct StageContext<'a> {
    pub pipeline: &'a DepthPipeline,
    pub sched: &'a NoiseSchedule,
    pub opts: &'a RestoreOptions,
    pub avlfe_mode: AvlfeMode,
    pub avlfe_steps: usize,
}

fn clamp01(v: f32, lo: f32, hi: f32) -> f32 {
    v.clamp(lo, hi)
}

impl StageContext<'_> {
    /// Stage A: plain supervised depth from raw features.
    pub fn pretrain_loss(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        sample: &DepthSample,
    ) -> Result<Var> {
        let img = g.input(sample.image.clone());
        let (f1, f2, f3, f4) = self.pipeline.encoder.forward_g(g, store, img)?;
        let out = self.pipeline.decode_g(g, store, f3, f4, f1, f2)?;
        silog_loss_g(g, out.depth_full, &sample.depth, &sample.mask)
    }

    /// Stage B: noise the frozen encoder features at a sampled step, predict
    /// degradation and noise, form the one-step restored estimate, decode,
    /// and supervise only through the sparse depth loss.
    pub fn diffusion_loss(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        sample: &DepthSample,
        t: usize,
        noise_seed: u64,
    ) -> Result<Var> {
        let feats = self.pipeline.encoder.encode(store, &sample.image)?;
        let e3 = rng::randn(&mut rng::stream(noise_seed, "train-eps3", 0), feats.f3.dims());
        let e4 = rng::randn(&mut rng::stream(noise_seed, "train-eps4", 0), feats.f4.dims());
        let f3_t = forward_noise(&feats.f3, t, self.sched, &e3)?;
        let f4_t = forward_noise(&feats.f4, t, self.sched, &e4)?;
        let c3 = build_conditions(&f3_t, &f4_t, Level::L3)?;
        let c4 = build_conditions(&f3_t, &f4_t, Level::L4)?;

        let total = self.sched.steps();
        let f3_tv = g.input(f3_t);
        let f4_tv = g.input(f4_t);
        let c3v = g.input(c3.c_mul);
        let c4v = g.input(c4.c_mul);
        let (deg3, eps3) = self.pipeline.restorer.l3.predict_g(g, store, f3_tv, t, total, c3v)?;
        let (deg4, eps4) = self.pipeline.restorer.l4.predict_g(g, store, f4_tv, t, total, c4v)?;

        let coef = if self.opts.literal_removal {
            (self.sched.alpha_bar(t) - self.sched.alpha_bar(t - 1)) as f32
        } else {
            self.sched.alpha_bar(t) as f32
        };
        let n3 = g.scale(eps3, coef);
        let d3 = g.sub(f3_tv, deg3);
        let f0_3 = g.sub(d3, n3);
        let n4 = g.scale(eps4, coef);
        let d4 = g.sub(f4_tv, deg4);
        let f0_4 = g.sub(d4, n4);

        let f1 = g.input(feats.f1);
        let f2 = g.input(feats.f2);
        let out = self.pipeline.decode_g(g, store, f0_3, f0_4, f1, f2)?;
        silog_loss_g(g, out.depth_full, &sample.depth, &sample.mask)
    }

    /// Stage C: the full pipeline with the enhancement modules on the skips.
    /// In compatible mode everything upstream is frozen, so the restored
    /// high-level features are computed outside the graph.
    pub fn avlfe_loss(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        sample: &DepthSample,
        restore_seed: u64,
        full: bool,
    ) -> Result<Var> {
        let aux = sample.aux_image.as_ref().ok_or_else(|| {
            Error::InvalidArg("auxiliary-view training needs aux images in the dataset".into())
        })?;
        let steps = self.avlfe_steps.min(self.sched.steps());
        let (f3r, f4r, f1, f2, a1, a2) = if full {
            let img = g.input(sample.image.clone());
            let (f1, f2, f3, f4) = self.pipeline.encoder.forward_g(g, store, img)?;
            let (r3, r4) =
                self.pipeline
                    .restore_g(g, store, f3, f4, self.sched, steps, restore_seed, self.opts)?;
            let aux_v = g.input(aux.clone());
            let (a1, a2) = self.pipeline.encoder.encode_low_g(g, store, aux_v)?;
            (r3, r4, f1, f2, a1, a2)
        } else {
            let feats = self.pipeline.encoder.encode(store, &sample.image)?;
            let high = crate::diffusion::HighFeatures { l3: feats.f3.clone(), l4: feats.f4.clone() };
            let trace = crate::diffusion::restore(
                &self.pipeline.restorer,
                store,
                &high,
                self.sched,
                steps,
                restore_seed,
                self.opts,
            )?;
            let fin = trace.final_features();
            let mut ag = Graph::new();
            let aux_v = ag.input(aux.clone());
            let (a1t, a2t) = self.pipeline.encoder.encode_low_g(&mut ag, store, aux_v)?;
            let f3r = g.input(fin.l3.clone());
            let f4r = g.input(fin.l4.clone());
            let f1 = g.input(feats.f1);
            let f2 = g.input(feats.f2);
            let a1 = g.input(ag.value(a1t).clone());
            let a2 = g.input(ag.value(a2t).clone());
            (f3r, f4r, f1, f2, a1, a2)
        };
        let e1 = self.pipeline.avlfe.l1.forward_g(g, store, f1, a1)?;
        let e2 = self.pipeline.avlfe.l2.forward_g(g, store, f2, a2)?;
        let out = self.pipeline.decode_g(g, store, f3r, f4r, e1, e2)?;
        silog_loss_g(g, out.depth_full, &sample.depth, &sample.mask)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub batches: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainLog {
    pub stage: String,
    pub epochs: Vec<EpochLog>,
}

/// Runs one training stage over the dataset's train split.
#[allow(clippy::too_many_arguments)]
pub fn train_stage(
    pipeline: &DepthPipeline,
    store: &mut ParameterStore,
    dataset: &Dataset,
    stage: Stage,
    hyper: &TrainHyper,
    sched: &NoiseSchedule,
    opts: &RestoreOptions,
    avlfe_mode: AvlfeMode,
    seed: u64,
) -> Result<TrainLog> {
    set_stage_trainability(store, stage, avlfe_mode, pipeline.block.param_prefix());
    let (lr, epochs) = match stage {
        Stage::Pretrain => (hyper.lr_pretrain, hyper.epochs_pretrain),
        Stage::Diffusion => (hyper.lr_diffusion, hyper.epochs_diffusion),
        Stage::Avlfe => (hyper.lr_avlfe, hyper.epochs_avlfe),
    };
    let mut adam = Adam::new(lr);
    let indices = dataset.indices(Split::Train);
    if indices.is_empty() {
        return Err(Error::InvalidArg("empty train split".into()));
    }
    let ctx = StageContext {
        pipeline,
        sched,
        opts,
        avlfe_mode,
        avlfe_steps: hyper.avlfe_steps,
    };
    let mut log = TrainLog { stage: stage.to_string(), epochs: Vec::new() };
    let mut step_counter: u64 = 0;
    for epoch in 0..epochs {
        let mut order = indices.clone();
        order.shuffle(&mut rng::stream(seed, "epoch-shuffle", epoch as u64));
        let mut epoch_loss = 0.0f64;
        let mut batches = 0usize;
        for chunk in order.chunks(hyper.batch.max(1)) {
            let results: Vec<Result<(f64, BTreeMap<String, Tensor>)>> = chunk
                .par_iter()
                .enumerate()
                .map(|(k, &idx)| {
                    let sample = dataset.load(idx)?;
                    let mut g = Graph::new();
                    let item_seed = seed
                        ^ (step_counter.wrapping_mul(0x9e3779b97f4a7c15))
                        ^ (k as u64).wrapping_mul(0xd1342543de82ef95);
                    let loss_var = match stage {
                        Stage::Pretrain => ctx.pretrain_loss(&mut g, store, &sample)?,
                        Stage::Diffusion => {
                            let t = 1 + (rng_usize(item_seed, "t-draw") % sched.steps());
                            ctx.diffusion_loss(&mut g, store, &sample, t, item_seed)?
                        }
                        Stage::Avlfe => {
                            ctx.avlfe_loss(&mut g, store, &sample, item_seed, avlfe_mode == AvlfeMode::Full)?
                        }
                    };
                    let loss = g.scalar_value(loss_var) as f64;
                    if !loss.is_finite() {
                        return Err(Error::NonFinite(format!("training loss at sample {idx}")));
                    }
                    let grads = g.backward(loss_var);
                    Ok((loss, g.param_grads(&grads)))
                })
                .collect();
            let mut total = BTreeMap::new();
            let mut batch_loss = 0.0f64;
            let count = results.len() as f32;
            for r in results {
                let (loss, grads) = r?;
                batch_loss += loss;
                for (name, gt) in grads {
                    match total.entry(name) {
                        std::collections::btree_map::Entry::Vacant(e) => {
                            e.insert(gt);
                        }
                        std::collections::btree_map::Entry::Occupied(mut e) => {
                            let sum = e.get().add(&gt)?;
                            *e.get_mut() = sum;
                        }
                    }
                }
            }
            for g in total.values_mut() {
                *g = g.scale(1.0 / count);
            }
            adam.step(store, &total)?;
            if let Some(c) = hyper.clip_weights {
                clip_prefix(store, pipeline.block.param_prefix(), c)?;
            }
            epoch_loss += batch_loss / count as f64;
            batches += 1;
            step_counter += 1;
        }
        log.epochs.push(EpochLog { epoch, mean_loss: epoch_loss / batches.max(1) as f64, batches });
    }
    Ok(log)
}

fn rng_usize(seed: u64, tag: &str) -> usize {
    use rand::Rng;
    rng::stream(seed, tag, 0).gen::<usize>()
}

fn clip_prefix(store: &mut ParameterStore, prefix: &str, c: f32) -> Result<()> {
    for name in store.names_sorted() {
        if name.starts_with(prefix) && store.is_trainable(&name)? {
            let t = store.get(&name)?.map(|v| clamp01(v, -c, c));
            store.update(&name, t)?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    Baseline,
    Diffusion,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalItem {
    pub entry: usize,
    pub rmse: f64,
    pub silog: f64,
    pub report: MetricsReport,
}

#[derive(Debug, Clone, Serialize)]
pub struct BucketAggregate {
    pub lo: f64,
    pub hi: f64,
    pub mean_rmse: f64,
    pub images: usize,
    pub pixels: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct DatasetEval {
    pub items: Vec<EvalItem>,
    pub mean: MetricsReport,
    pub buckets: Vec<BucketAggregate>,
}

/// Evaluates one split; per-image metrics averaged, buckets aggregated over
/// images that populate them.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    pipeline: &DepthPipeline,
    store: &ParameterStore,
    dataset: &Dataset,
    split: Split,
    mode: EvalMode,
    sched: &NoiseSchedule,
    steps: usize,
    seed: u64,
    opts: &RestoreOptions,
    avlfe_mode: AvlfeMode,
) -> Result<DatasetEval> {
    let indices = dataset.indices(split);
    if indices.is_empty() {
        return Err(Error::InvalidArg(format!("empty split {split}")));
    }
    let results: Vec<Result<(usize, DepthMap, DepthSample)>> = indices
        .par_iter()
        .map(|&idx| {
            let sample = dataset.load(idx)?;
            let depth = match mode {
                EvalMode::Baseline => pipeline.baseline_forward(store, &sample.image)?,
                EvalMode::Diffusion => {
                    let (d, _) = pipeline.infer(
                        store,
                        &sample.image,
                        sched,
                        steps,
                        seed ^ idx as u64,
                        opts,
                        avlfe_mode,
                        sample.aux_image.as_ref(),
                    )?;
                    d
                }
            };
            Ok((idx, depth, sample))
        })
        .collect();

    let mut items = Vec::with_capacity(indices.len());
    let mut bucket_sums: Vec<(f64, usize, usize)> = vec![(0.0, 0, 0); metrics::DEFAULT_BUCKETS.len()];
    let mut mean_acc = [0.0f64; 7];
    let mut total_pixels = 0usize;
    for r in results {
        let (idx, depth, sample) = r?;
        let report = metrics::depth_metrics(depth.values(), &sample.depth, &sample.mask)?;
        let silog = metrics::silog_loss(depth.values(), &sample.depth, &sample.mask)?;
        let buckets = metrics::range_metrics(
            depth.values(),
            &sample.depth,
            &sample.mask,
            &metrics::DEFAULT_BUCKETS,
        )?;
        for (agg, b) in bucket_sums.iter_mut().zip(buckets.iter()) {
            if let Some(rep) = &b.report {
                agg.0 += rep.rmse;
                agg.1 += 1;
                agg.2 += rep.pixels;
            }
        }
        mean_acc[0] += report.rmse;
        mean_acc[1] += report.abs_rel;
        mean_acc[2] += report.sq_rel;
        mean_acc[3] += report.rmse_log;
        mean_acc[4] += report.delta1;
        mean_acc[5] += report.delta2;
        mean_acc[6] += report.delta3;
        total_pixels += report.pixels;
        items.push(EvalItem { entry: idx, rmse: report.rmse, silog, report });
    }
    let n = items.len() as f64;
    let mean = MetricsReport {
        rmse: mean_acc[0] / n,
        abs_rel: mean_acc[1] / n,
        sq_rel: mean_acc[2] / n,
        rmse_log: mean_acc[3] / n,
        delta1: mean_acc[4] / n,
        delta2: mean_acc[5] / n,
        delta3: mean_acc[6] / n,
        pixels: total_pixels,
    };
    let buckets = metrics::DEFAULT_BUCKETS
        .iter()
        .zip(bucket_sums)
        .map(|(&(lo, hi), (sum, images, pixels))| BucketAggregate {
            lo,
            hi,
            mean_rmse: if images > 0 { sum / images as f64 } else { f64::NAN },
            images,
            pixels,
        })
        .collect();
    Ok(DatasetEval { items, mean, buckets })
}

/// RMSE of the best constant predictor (per-image optimal constant), the
/// floor any trained model must beat.
pub fn constant_predictor_rmse(dataset: &Dataset, split: Split) -> Result<f64> {
    let indices = dataset.indices(split);
    let mut total = 0.0f64;
    for &idx in &indices {
        let s = dataset.load(idx)?;
        let mut sum = 0.0f64;
        let mut n = 0usize;
        for (d, m) in s.depth.data().iter().zip(s.mask.data().iter()) {
            if *m > 0.0 {
                sum += *d as f64;
                n += 1;
            }
        }
        let mean = sum / n.max(1) as f64;
        let mut se = 0.0f64;
        for (d, m) in s.depth.data().iter().zip(s.mask.data().iter()) {
            if *m > 0.0 {
                se += (*d as f64 - mean) * (*d as f64 - mean);
            }
        }
        total += (se / n.max(1) as f64).sqrt();
    }
    Ok(total / indices.len().max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::depthnet::{DecoderVariant, ModelShape};
    use crate::schedule::{build_schedule, ScheduleKind};
    use crate::synthdata::{generate_dataset, DatasetCounts, SceneSpec};

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

    fn tiny_dataset(dir: &std::path::Path) -> Dataset {
        let spec = SceneSpec { size: 32, seed: 5, ..Default::default() };
        let counts = DatasetCounts { train: 6, val: 2, test: 2 };
        generate_dataset(&spec, &counts, true, dir).unwrap();
        Dataset::open(dir).unwrap()
    }

    #[test]
    fn adam_moves_toward_minimum() {
        let mut store = ParameterStore::new();
        store.insert("p", Tensor::new(vec![2], vec![5.0, -3.0]).unwrap(), true).unwrap();
        let mut adam = Adam::new(0.1);
        for _ in 0..400 {
            // grad of 0.5*p^2 is p
            let grad = store.get("p").unwrap().clone();
            let mut grads = BTreeMap::new();
            grads.insert("p".to_string(), grad);
            adam.step(&mut store, &grads).unwrap();
        }
        let p = store.get("p").unwrap();
        assert!(p.data().iter().all(|v| v.abs() < 0.05), "{:?}", p.data());
    }

    #[test]
    fn adam_refuses_frozen_parameters() {
        let mut store = ParameterStore::new();
        store.insert("p", Tensor::scalar(1.0), false).unwrap();
        let mut adam = Adam::new(0.1);
        let mut grads = BTreeMap::new();
        grads.insert("p".to_string(), Tensor::scalar(1.0));
        assert!(matches!(adam.step(&mut store, &grads), Err(Error::FrozenViolation(_))));
    }

    #[test]
    fn graph_silog_matches_eval_silog() {
        let pred = crate::rng::rand_uniform(&mut rng::stream(1, "p", 0), &[1, 4, 4], 1.0, 50.0);
        let gt = crate::rng::rand_uniform(&mut rng::stream(1, "g", 0), &[1, 4, 4], 1.0, 50.0);
        let mask = Tensor::from_fn(&[1, 4, 4], |i| if i % 3 == 0 { 1.0 } else { 0.0 });
        let mut g = Graph::new();
        let p = g.input(pred.clone());
        let loss = silog_loss_g(&mut g, p, &gt, &mask).unwrap();
        let via_graph = g.scalar_value(loss) as f64;
        let via_eval = metrics::silog_loss(&pred, &gt, &mask).unwrap();
        assert!((via_graph - via_eval).abs() < 1e-4, "{via_graph} vs {via_eval}");
    }

    #[test]
    fn pretrain_step_reduces_loss_and_respects_freezing() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny_dataset(dir.path());
        let shape = tiny_shape();
        let mut store = ParameterStore::new();
        let pipeline = DepthPipeline::init(&mut store, &shape, DecoderVariant::Inv, 1).unwrap();
        let sched = build_schedule(2, ScheduleKind::Linear).unwrap();
        let opts = RestoreOptions::default();
        let hyper = TrainHyper {
            epochs_pretrain: 2,
            batch: 3,
            lr_pretrain: 2e-3,
            ..Default::default()
        };
        let before = store.clone();
        let log = train_stage(
            &pipeline, &mut store, &ds, Stage::Pretrain, &hyper, &sched, &opts, AvlfeMode::Off, 3,
        )
        .unwrap();
        assert_eq!(log.epochs.len(), 2);
        assert!(log.epochs[1].mean_loss < log.epochs[0].mean_loss * 1.05);
        // frozen groups untouched
        let diff = before.diff_names(&store);
        assert!(diff.iter().all(|n| !n.starts_with("rnet.") && !n.starts_with("avlfe.")),
            "diffusion/avlfe params moved during pretrain: {diff:?}");
        assert!(diff.iter().any(|n| n.starts_with("enc.")));
    }

    #[test]
    fn diffusion_stage_touches_only_its_parameters() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny_dataset(dir.path());
        let shape = tiny_shape();
        let mut store = ParameterStore::new();
        let pipeline = DepthPipeline::init(&mut store, &shape, DecoderVariant::Inv, 2).unwrap();
        let sched = build_schedule(2, ScheduleKind::Linear).unwrap();
        let opts = RestoreOptions::default();
        let hyper = TrainHyper { epochs_diffusion: 1, batch: 3, ..Default::default() };
        let before = store.clone();
        train_stage(
            &pipeline, &mut store, &ds, Stage::Diffusion, &hyper, &sched, &opts, AvlfeMode::Off, 4,
        )
        .unwrap();
        let diff = before.diff_names(&store);
        assert!(!diff.is_empty());
        for name in &diff {
            assert!(
                name.starts_with("rnet.") || name.starts_with("invdec."),
                "frozen parameter changed in stage B: {name}"
            );
        }
        // encoder outputs bit-identical before and after (freeze contract)
        let img = ds.load(0).unwrap().image;
        let fa = pipeline.encoder.encode(&before, &img).unwrap();
        let fb = pipeline.encoder.encode(&store, &img).unwrap();
        assert!(fa.f4.bitwise_eq(&fb.f4));
    }

    #[test]
    fn avlfe_compatible_changes_only_avlfe_params() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny_dataset(dir.path());
        let shape = tiny_shape();
        let mut store = ParameterStore::new();
        let pipeline = DepthPipeline::init(&mut store, &shape, DecoderVariant::Inv, 3).unwrap();
        let sched = build_schedule(2, ScheduleKind::Linear).unwrap();
        let opts = RestoreOptions::default();
        let hyper = TrainHyper { epochs_avlfe: 1, batch: 3, ..Default::default() };
        let before = store.clone();
        train_stage(
            &pipeline, &mut store, &ds, Stage::Avlfe, &hyper, &sched, &opts,
            AvlfeMode::Compatible, 5,
        )
        .unwrap();
        let diff = before.diff_names(&store);
        assert!(!diff.is_empty());
        assert!(diff.iter().all(|n| n.starts_with("avlfe.")), "{diff:?}");
    }

    #[test]
    fn training_is_bit_reproducible() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny_dataset(dir.path());
        let shape = tiny_shape();
        let sched = build_schedule(2, ScheduleKind::Linear).unwrap();
        let opts = RestoreOptions::default();
        let hyper = TrainHyper { epochs_pretrain: 1, batch: 2, ..Default::default() };
        let mut outs = Vec::new();
        for _ in 0..2 {
            let mut store = ParameterStore::new();
            let pipeline = DepthPipeline::init(&mut store, &shape, DecoderVariant::Inv, 7).unwrap();
            train_stage(
                &pipeline, &mut store, &ds, Stage::Pretrain, &hyper, &sched, &opts,
                AvlfeMode::Off, 11,
            )
            .unwrap();
            outs.push(store);
        }
        assert!(outs[0].diff_names(&outs[1]).is_empty());
    }

    #[test]
    fn evaluate_baseline_and_constant_floor() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny_dataset(dir.path());
        let shape = tiny_shape();
        let mut store = ParameterStore::new();
        let pipeline = DepthPipeline::init(&mut store, &shape, DecoderVariant::Inv, 9).unwrap();
        let sched = build_schedule(2, ScheduleKind::Linear).unwrap();
        let opts = RestoreOptions::default();
        let eval = evaluate(
            &pipeline, &store, &ds, Split::Test, EvalMode::Baseline, &sched, 2, 0, &opts,
            AvlfeMode::Off,
        )
        .unwrap();
        assert_eq!(eval.items.len(), 2);
        assert!(eval.mean.rmse.is_finite());
        let floor = constant_predictor_rmse(&ds, Split::Test).unwrap();
        assert!(floor > 0.0);
        // bucket pixel counts sum to the per-image mask totals
        let bucket_pixels: usize = eval.buckets.iter().map(|b| b.pixels).sum();
        assert_eq!(bucket_pixels, eval.mean.pixels);
    }
}
