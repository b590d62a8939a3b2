//! Diagnostics on the frozen pipeline: per-image optimization of one
//! encoder feature level at a time (how much depth accuracy improves when a
//! level's features get better), a deeply-optimized joint feature pair that
//! stands in for the unobservable ground-truth feature, and the deviation of
//! the reverse process from that proxy across inference steps.

use serde::Serialize;

use crate::autodiff::{Graph, Var};
use crate::depthnet::DecoderVariant;
use crate::diffusion::{restore, HighFeatures, RestorationTrace, RestoreOptions};
use crate::error::{Error, Result};
use crate::metrics;
use crate::model::DepthPipeline;
use crate::params::ParameterStore;
use crate::schedule::NoiseSchedule;
use crate::synthdata::DepthSample;
use crate::tensor::Tensor;
use crate::train::silog_loss_g;

#[derive(Debug, Clone, Serialize)]
pub struct FeatOptCurve {
    pub level: usize,
    pub lr: f32,
    /// RMSE after each optimization step; entry 0 is the baseline.
    pub rmse: Vec<f64>,
    /// Best-so-far envelope of `rmse` (non-increasing).
    pub best: Vec<f64>,
}

/// Adam on a single tensor.
struct TensorAdam {
    lr: f32,
    m: Vec<f32>,
    v: Vec<f32>,
    t: i32,
}

impl TensorAdam {
    fn new(lr: f32, n: usize) -> Self {
        Self { lr, m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    fn step(&mut self, value: &mut Tensor, grad: &Tensor) {
        self.t += 1;
        let bc1 = 1.0 - 0.9f32.powi(self.t);
        let bc2 = 1.0 - 0.999f32.powi(self.t);
        for ((p, &g), (m, v)) in value
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = 0.9 * *m + 0.1 * g;
            *v = 0.999 * *v + 0.001 * g * g;
            *p -= self.lr * (*m / bc1) / ((*v / bc2).sqrt() + 1e-8);
        }
    }
}

fn decode_with_levels(
    pipeline: &DepthPipeline,
    g: &mut Graph,
    store: &ParameterStore,
    levels: [Var; 4],
) -> Result<Var> {
    let [f1, f2, f3, f4] = levels;
    let out = pipeline.decode_g(g, store, f3, f4, f1, f2)?;
    Ok(out.depth_full)
}

fn masked_rmse(pred: &Tensor, sample: &DepthSample) -> Result<f64> {
    Ok(metrics::depth_metrics(pred, &sample.depth, &sample.mask)?.rmse)
}

/// Treats one encoder level's feature map as the optimization variable
/// (all parameters and the other levels frozen) and descends the masked
/// SiLog loss, recording RMSE after every step.
pub fn optimize_features(
    pipeline: &DepthPipeline,
    store: &ParameterStore,
    sample: &DepthSample,
    level: usize,
    steps: usize,
    lr: f32,
) -> Result<FeatOptCurve> {
    if !(1..=4).contains(&level) {
        return Err(Error::InvalidArg(format!("feature level {level} outside 1..=4")));
    }
    let before = store.clone();
    let feats = pipeline.encoder.encode(store, &sample.image)?;
    let mut current = match level {
        1 => feats.f1.clone(),
        2 => feats.f2.clone(),
        3 => feats.f3.clone(),
        4 => feats.f4.clone(),
        _ => unreachable!(),
    };
    let mut adam = TensorAdam::new(lr, current.numel());
    let mut rmse = Vec::with_capacity(steps + 1);
    for step in 0..=steps {
        let mut g = Graph::new();
        let var = g.leaf_grad(current.clone());
        let fixed = |g: &mut Graph, t: &Tensor| g.input(t.clone());
        let levels = [
            if level == 1 { var } else { fixed(&mut g, &feats.f1) },
            if level == 2 { var } else { fixed(&mut g, &feats.f2) },
            if level == 3 { var } else { fixed(&mut g, &feats.f3) },
            if level == 4 { var } else { fixed(&mut g, &feats.f4) },
        ];
        let depth = decode_with_levels(pipeline, &mut g, store, levels)?;
        let clamped = g
            .value(depth)
            .map(|v| v.clamp(pipeline.shape.d_min, pipeline.shape.d_max));
        rmse.push(masked_rmse(&clamped, sample)?);
        if step == steps || lr == 0.0 {
            continue;
        }
        let loss = silog_loss_g(&mut g, depth, &sample.depth, &sample.mask)?;
        let grads = g.backward(loss);
        if let Some(grad) = grads.wrt(var) {
            adam.step(&mut current, grad);
        }
    }
    if store.diff_names(&before) != Vec::<String>::new() {
        return Err(Error::FrozenViolation("model parameters moved during feature optimization".into()));
    }
    let mut best = rmse.clone();
    for i in 1..best.len() {
        best[i] = best[i].min(best[i - 1]);
    }
    Ok(FeatOptCurve { level, lr, rmse, best })
}

/// Deeply optimized high-level feature pair standing in for the assumed
/// ground-truth feature: levels 3 and 4 descend jointly, and the
/// best-scoring pair is returned.
pub fn proxy_gt_feature(
    pipeline: &DepthPipeline,
    store: &ParameterStore,
    sample: &DepthSample,
    steps: usize,
    lr: f32,
) -> Result<HighFeatures> {
    let feats = pipeline.encoder.encode(store, &sample.image)?;
    let mut cur3 = feats.f3.clone();
    let mut cur4 = feats.f4.clone();
    let mut adam3 = TensorAdam::new(lr, cur3.numel());
    let mut adam4 = TensorAdam::new(lr, cur4.numel());
    let mut best = HighFeatures { l3: cur3.clone(), l4: cur4.clone() };
    let mut best_rmse = f64::INFINITY;
    for step in 0..=steps {
        let mut g = Graph::new();
        let v3 = g.leaf_grad(cur3.clone());
        let v4 = g.leaf_grad(cur4.clone());
        let f1 = g.input(feats.f1.clone());
        let f2 = g.input(feats.f2.clone());
        let out = pipeline.decode_g(&mut g, store, v3, v4, f1, f2)?;
        let clamped = g
            .value(out.depth_full)
            .map(|v| v.clamp(pipeline.shape.d_min, pipeline.shape.d_max));
        let r = masked_rmse(&clamped, sample)?;
        if r < best_rmse {
            best_rmse = r;
            best = HighFeatures { l3: cur3.clone(), l4: cur4.clone() };
        }
        if step == steps {
            break;
        }
        let loss = silog_loss_g(&mut g, out.depth_full, &sample.depth, &sample.mask)?;
        let grads = g.backward(loss);
        if let Some(gr) = grads.wrt(v3) {
            adam3.step(&mut cur3, gr);
        }
        if let Some(gr) = grads.wrt(v4) {
            adam4.step(&mut cur4, gr);
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, Serialize)]
pub struct DeviationTrace {
    pub variant: DecoderVariant,
    /// Distance to the proxy at every visited time point, length steps + 1.
    pub distances: Vec<f64>,
}

impl DeviationTrace {
    /// Fraction of strides on which the distance to the proxy decreased.
    pub fn decreasing_fraction(&self) -> f64 {
        if self.distances.len() < 2 {
            return 0.0;
        }
        let dec = self
            .distances
            .windows(2)
            .filter(|w| w[1] < w[0])
            .count();
        dec as f64 / (self.distances.len() - 1) as f64
    }
}

/// Runs the reverse process and records the distance between the current
/// features and the proxy at every time point.
#[allow(clippy::too_many_arguments)]
pub fn measure_deviation(
    pipeline: &DepthPipeline,
    store: &ParameterStore,
    sample: &DepthSample,
    proxy: &HighFeatures,
    sched: &NoiseSchedule,
    steps: usize,
    seed: u64,
    opts: &RestoreOptions,
) -> Result<(DeviationTrace, RestorationTrace)> {
    let feats = pipeline.encoder.encode(store, &sample.image)?;
    let f_in = HighFeatures { l3: feats.f3, l4: feats.f4 };
    let mut trace = restore(&pipeline.restorer, store, &f_in, sched, steps, seed, opts)?;
    let distances: Vec<f64> = trace
        .points
        .iter()
        .map(|p| p.features.distance(proxy))
        .collect::<Result<_>>()?;
    trace.deviations = Some(distances.clone());
    Ok((DeviationTrace { variant: pipeline.variant(), distances }, trace))
}

// ---- CSV export ----

pub fn featopt_csv_header() -> String {
    "image,level,step,rmse,best\n".to_string()
}

pub fn featopt_csv_rows(image: usize, curve: &FeatOptCurve) -> String {
    let mut out = String::new();
    for (step, (r, b)) in curve.rmse.iter().zip(curve.best.iter()).enumerate() {
        out.push_str(&format!("{image},{},{step},{r:.6},{b:.6}\n", curve.level));
    }
    out
}

pub fn deviation_csv_header() -> String {
    "image,variant,step,distance\n".to_string()
}

pub fn deviation_csv_rows(image: usize, trace: &DeviationTrace) -> String {
    let mut out = String::new();
    for (step, d) in trace.distances.iter().enumerate() {
        out.push_str(&format!("{image},{},{step},{d:.6}\n", trace.variant));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::avlfe::AvlfeMode;
    use crate::depthnet::ModelShape;
    use crate::diffusion::{restore_noise, Level, OraclePredictor};
    use crate::params::ParameterStore;
    use crate::rng;
    use crate::schedule::{build_schedule, ScheduleKind};
    use crate::synthdata::{gen_sample, SceneSpec};

    fn tiny() -> (ParameterStore, DepthPipeline, DepthSample) {
        let shape = ModelShape {
            enc_channels: [8, 16, 32, 64],
            stem_mid: 8,
            invdec_hidden: 8,
            trunk_width: 16,
            time_embed_dim: 16,
            trunk_blocks: 1,
            bins: 8,
            tail_width: 16,
            ..Default::default()
        };
        let mut store = ParameterStore::new();
        let pipeline = DepthPipeline::init(&mut store, &shape, DecoderVariant::Inv, 1).unwrap();
        let spec = SceneSpec { size: 32, seed: 9, ..Default::default() };
        let sample = gen_sample(&spec, 0, false).unwrap();
        (store, pipeline, sample)
    }

    #[test]
    fn zero_steps_and_zero_lr_are_flat() {
        let (store, pipeline, sample) = tiny();
        let c = optimize_features(&pipeline, &store, &sample, 4, 0, 1e-2).unwrap();
        assert_eq!(c.rmse.len(), 1);
        let c = optimize_features(&pipeline, &store, &sample, 3, 4, 0.0).unwrap();
        assert_eq!(c.rmse.len(), 5);
        assert!(c.rmse.windows(2).all(|w| (w[0] - w[1]).abs() < 1e-12));
    }

    #[test]
    fn best_curve_is_non_increasing_and_descends() {
        let (store, pipeline, sample) = tiny();
        let c = optimize_features(&pipeline, &store, &sample, 4, 12, 5e-2).unwrap();
        assert_eq!(c.rmse.len(), 13);
        assert!(c.best.windows(2).all(|w| w[1] <= w[0]));
        assert!(
            c.best.last().unwrap() < &c.rmse[0],
            "optimization failed to improve RMSE: {:?}",
            c.rmse
        );
    }

    #[test]
    fn invalid_level_rejected() {
        let (store, pipeline, sample) = tiny();
        assert!(optimize_features(&pipeline, &store, &sample, 0, 1, 1e-2).is_err());
        assert!(optimize_features(&pipeline, &store, &sample, 5, 1, 1e-2).is_err());
    }

    #[test]
    fn proxy_beats_shorter_runs_and_is_deterministic() {
        let (store, pipeline, sample) = tiny();
        let proxy = proxy_gt_feature(&pipeline, &store, &sample, 15, 5e-2).unwrap();
        let proxy2 = proxy_gt_feature(&pipeline, &store, &sample, 15, 5e-2).unwrap();
        assert!(proxy.l3.bitwise_eq(&proxy2.l3) && proxy.l4.bitwise_eq(&proxy2.l4));
        // proxy decodes at least as well as the raw features
        let feats = pipeline.encoder.encode(&store, &sample.image).unwrap();
        let raw = pipeline
            .decode_depth(&store, &feats.f3, &feats.f4, &feats.f1, &feats.f2)
            .unwrap();
        let via_proxy = pipeline
            .decode_depth(&store, &proxy.l3, &proxy.l4, &feats.f1, &feats.f2)
            .unwrap();
        let r_raw = masked_rmse(raw.values(), &sample).unwrap();
        let r_proxy = masked_rmse(via_proxy.values(), &sample).unwrap();
        assert!(r_proxy <= r_raw + 1e-12, "{r_proxy} vs {r_raw}");
    }

    #[test]
    fn oracle_deviation_trace_strictly_decreases() {
        // Build an oracle around the pipeline's own features: proxy = raw
        // features, predictions know the injected noise exactly.
        let (store, pipeline, sample) = tiny();
        let sched = build_schedule(4, ScheduleKind::Linear).unwrap();
        let feats = pipeline.encoder.encode(&store, &sample.image).unwrap();
        let proxy = HighFeatures { l3: feats.f3.clone(), l4: feats.f4.clone() };
        let seed = 33u64;
        let oracle = OraclePredictor {
            deg3: Tensor::zeros(feats.f3.dims()),
            eps3: restore_noise(seed, Level::L3, feats.f3.dims()),
            deg4: Tensor::zeros(feats.f4.dims()),
            eps4: restore_noise(seed, Level::L4, feats.f4.dims()),
        };
        let f_in = proxy.clone();
        let trace = restore(&oracle, &store, &f_in, &sched, 4, seed, &RestoreOptions::default()).unwrap();
        let dists: Vec<f64> = trace
            .points
            .iter()
            .map(|p| p.features.distance(&proxy).unwrap())
            .collect();
        for w in dists.windows(2) {
            assert!(w[1] < w[0], "oracle deviation did not decrease: {dists:?}");
        }
        assert!(dists.last().unwrap() < &1e-5);
    }

    #[test]
    fn measured_deviation_has_right_length_and_tags() {
        let (store, pipeline, sample) = tiny();
        let sched = build_schedule(3, ScheduleKind::Linear).unwrap();
        let proxy = proxy_gt_feature(&pipeline, &store, &sample, 5, 5e-2).unwrap();
        let (dev, trace) = measure_deviation(
            &pipeline, &store, &sample, &proxy, &sched, 3, 7, &RestoreOptions::default(),
        )
        .unwrap();
        assert_eq!(dev.distances.len(), 4);
        assert_eq!(trace.deviations.as_ref().unwrap().len(), 4);
        assert_eq!(dev.variant, DecoderVariant::Inv);
        // steps = 0 gives a single-entry trace
        let (dev0, _) = measure_deviation(
            &pipeline, &store, &sample, &proxy, &sched, 0, 7, &RestoreOptions::default(),
        )
        .unwrap();
        assert_eq!(dev0.distances.len(), 1);
        let _ = AvlfeMode::Off;
    }
}
