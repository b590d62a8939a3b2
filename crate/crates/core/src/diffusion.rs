//! Feature restoration by indirect diffusion: a restoration network predicts
//! the degradation and noise carried by the two high-level features, and a
//! deterministic reverse sampler strips both away over a configurable number
//! of strides.
//!
//! The default sampler removes `(beta_bar(hi) - beta_bar(lo))` of the
//! predicted degradation per stride so that the removal telescopes to exactly
//! one net subtraction across any stride plan. The single-shot removal of the
//! full prediction at every step remains available behind
//! [`RestoreOptions::literal_removal`], which demonstrably over-subtracts
//! when iterated.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{time_embedding, Conv2d, Linear};
use crate::params::ParameterStore;
use crate::rng;
use crate::schedule::NoiseSchedule;
use crate::tensor::{pixel_shuffle, space_to_depth, Tensor};

/// The two high-level feature maps fed to the restoration process.
#[derive(Debug, Clone)]
pub struct HighFeatures {
    pub l3: Tensor,
    pub l4: Tensor,
}

impl HighFeatures {
    /// Combined Euclidean distance across both levels.
    pub fn distance(&self, other: &HighFeatures) -> Result<f64> {
        let d3 = self.l3.sub(&other.l3)?.norm_l2();
        let d4 = self.l4.sub(&other.l4)?.norm_l2();
        Ok((d3 * d3 + d4 * d4).sqrt())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Level {
    L3,
    L4,
}

/// Mutual condition map: the other level's noisy feature brought to the
/// target level's scale with pixel shuffle / space-to-depth.
#[derive(Debug, Clone)]
pub struct ConditionMaps {
    pub c_mul: Tensor,
}

/// Builds the condition for `target` from the current noisy features. The
/// spatial relation between the levels must be a factor of two (or equal,
/// which degenerates to an identity rearrangement).
pub fn build_conditions(
    noisy_l3: &Tensor,
    noisy_l4: &Tensor,
    target: Level,
) -> Result<ConditionMaps> {
    let (_, h3, w3) = noisy_l3.chw()?;
    let (_, h4, w4) = noisy_l4.chw()?;
    let r = if h3 == h4 && w3 == w4 {
        1
    } else if h3 == 2 * h4 && w3 == 2 * w4 {
        2
    } else {
        return Err(Error::ShapeMismatch(format!(
            "condition maps need a factor-of-2 scale relation, got {h3}x{w3} vs {h4}x{w4}"
        )));
    };
    let c_mul = match target {
        Level::L3 => pixel_shuffle(noisy_l4, r)?,
        Level::L4 => space_to_depth(noisy_l3, r)?,
    };
    Ok(ConditionMaps { c_mul })
}

/// Per-level restoration network: time-conditioned conv trunk with two heads
/// predicting the degradation and the noise, each shaped like the input
/// feature.
#[derive(Debug, Clone)]
pub struct RestorationNet {
    feat_channels: usize,
    cond_channels: usize,
    time_dim: usize,
    input: Conv2d,
    time_lin: Linear,
    blocks: Vec<(Conv2d, Conv2d)>,
    head_deg: Conv2d,
    head_eps: Conv2d,
}

impl RestorationNet {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        store: &mut ParameterStore,
        prefix: &str,
        feat_channels: usize,
        cond_channels: usize,
        width: usize,
        time_dim: usize,
        num_blocks: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let input = Conv2d::init(
            store,
            &format!("{prefix}.input"),
            width,
            feat_channels + cond_channels,
            3,
            1,
            1,
            false,
            rng,
        )?;
        let time_lin = Linear::init(store, &format!("{prefix}.time"), width, time_dim, false, rng)?;
        let mut blocks = Vec::with_capacity(num_blocks);
        for i in 0..num_blocks {
            let c1 = Conv2d::init(store, &format!("{prefix}.block{i}.c1"), width, width, 3, 1, 1, false, rng)?;
            let c2 = Conv2d::init(store, &format!("{prefix}.block{i}.c2"), width, width, 3, 1, 1, true, rng)?;
            blocks.push((c1, c2));
        }
        // zero-init heads: a fresh model predicts zero degradation and noise
        let head_deg = Conv2d::init(store, &format!("{prefix}.deg"), feat_channels, width, 3, 1, 1, true, rng)?;
        let head_eps = Conv2d::init(store, &format!("{prefix}.eps"), feat_channels, width, 3, 1, 1, true, rng)?;
        Ok(Self { feat_channels, cond_channels, time_dim, input, time_lin, blocks, head_deg, head_eps })
    }

    pub fn feat_channels(&self) -> usize {
        self.feat_channels
    }

    /// Graph-mode prediction used by training and inference alike.
    pub fn predict_g(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        f_t: Var,
        t: usize,
        total: usize,
        cond: Var,
    ) -> Result<(Var, Var)> {
        let (fc, _, _) = g.value(f_t).chw()?;
        let (cc, _, _) = g.value(cond).chw()?;
        if fc != self.feat_channels || cc != self.cond_channels {
            return Err(Error::ShapeMismatch(format!(
                "restoration net expects {}+{} channels, got {fc}+{cc}",
                self.feat_channels, self.cond_channels
            )));
        }
        let x = g.concat_c(f_t, cond);
        let mut h = self.input.forward(g, store, x)?;
        let emb = g.input(time_embedding(t, total, self.time_dim));
        let emb = self.time_lin.forward(g, store, emb)?;
        h = g.add_bias(h, emb);
        h = g.gelu(h);
        for (c1, c2) in &self.blocks {
            let inner = c1.forward(g, store, h)?;
            let inner = g.gelu(inner);
            let inner = c2.forward(g, store, inner)?;
            h = g.add(h, inner);
        }
        let deg = self.head_deg.forward(g, store, h)?;
        let eps = self.head_eps.forward(g, store, h)?;
        Ok((deg, eps))
    }
}

/// Anything that can stand in for the trained restoration networks: the real
/// model at inference, or an oracle with privileged knowledge in tests.
pub trait RestorePredictor {
    fn predict(
        &self,
        store: &ParameterStore,
        level: Level,
        f_t: &Tensor,
        t: usize,
        total: usize,
        cond: &ConditionMaps,
    ) -> Result<(Tensor, Tensor)>;
}

/// The paired level-3/level-4 restoration networks.
#[derive(Debug, Clone)]
pub struct Restorer {
    pub l3: RestorationNet,
    pub l4: RestorationNet,
}

impl RestorePredictor for Restorer {
    fn predict(
        &self,
        store: &ParameterStore,
        level: Level,
        f_t: &Tensor,
        t: usize,
        total: usize,
        cond: &ConditionMaps,
    ) -> Result<(Tensor, Tensor)> {
        if t < 1 || t > total {
            return Err(Error::InvalidArg(format!("predict step {t} outside 1..={total}")));
        }
        let net = match level {
            Level::L3 => &self.l3,
            Level::L4 => &self.l4,
        };
        let mut g = Graph::new();
        let fv = g.input(f_t.clone());
        let cv = g.input(cond.c_mul.clone());
        let (deg, eps) = net.predict_g(&mut g, store, fv, t, total, cv)?;
        Ok((g.value(deg).clone(), g.value(eps).clone()))
    }
}

/// Oracle that returns fixed degradation / noise targets regardless of input.
pub struct OraclePredictor {
    pub deg3: Tensor,
    pub eps3: Tensor,
    pub deg4: Tensor,
    pub eps4: Tensor,
}

impl RestorePredictor for OraclePredictor {
    fn predict(
        &self,
        _store: &ParameterStore,
        level: Level,
        _f_t: &Tensor,
        _t: usize,
        _total: usize,
        _cond: &ConditionMaps,
    ) -> Result<(Tensor, Tensor)> {
        Ok(match level {
            Level::L3 => (self.deg3.clone(), self.eps3.clone()),
            Level::L4 => (self.deg4.clone(), self.eps4.clone()),
        })
    }
}

/// Restored estimate at step t. Default mode removes the full predicted
/// noise `alpha_bar(t) * eps`; the literal mode keeps the printed
/// `(alpha_bar(t) - alpha_bar(t-1))` factor, which cannot reproduce the
/// clean feature even from oracle predictions.
pub fn one_step_estimate(
    f_t: &Tensor,
    t: usize,
    deg: &Tensor,
    eps: &Tensor,
    sched: &NoiseSchedule,
    literal: bool,
) -> Result<Tensor> {
    if t < 1 || t > sched.steps() {
        return Err(Error::InvalidArg(format!(
            "one_step_estimate step {t} outside 1..={}",
            sched.steps()
        )));
    }
    let coef = if literal {
        (sched.alpha_bar(t) - sched.alpha_bar(t - 1)) as f32
    } else {
        sched.alpha_bar(t) as f32
    };
    combine(f_t, deg, 1.0, eps, coef)
}

/// One reverse stride from `t` to `t - 1` (the unit case of
/// [`reverse_stride`]).
pub fn reverse_step(
    f_t: &Tensor,
    t: usize,
    deg: &Tensor,
    eps: &Tensor,
    sched: &NoiseSchedule,
    literal: bool,
) -> Result<Tensor> {
    if t == 0 {
        return Err(Error::InvalidArg("reverse_step at t = 0".into()));
    }
    reverse_stride(f_t, t, t - 1, deg, eps, sched, literal)
}

/// Deterministic reverse stride from `t_hi` down to `t_lo`.
pub fn reverse_stride(
    f_t: &Tensor,
    t_hi: usize,
    t_lo: usize,
    deg: &Tensor,
    eps: &Tensor,
    sched: &NoiseSchedule,
    literal: bool,
) -> Result<Tensor> {
    if t_hi == 0 || t_hi > sched.steps() || t_lo >= t_hi {
        return Err(Error::InvalidArg(format!(
            "reverse stride {t_hi} -> {t_lo} invalid for T = {}",
            sched.steps()
        )));
    }
    let eps_coef = (sched.alpha_bar(t_hi) - sched.alpha_bar(t_lo)) as f32;
    let deg_coef = if literal {
        1.0
    } else {
        (sched.beta_bar(t_hi) - sched.beta_bar(t_lo)) as f32
    };
    combine(f_t, deg, deg_coef, eps, eps_coef)
}

fn combine(f_t: &Tensor, deg: &Tensor, cd: f32, eps: &Tensor, ce: f32) -> Result<Tensor> {
    if f_t.dims() != deg.dims() || f_t.dims() != eps.dims() {
        return Err(Error::ShapeMismatch(format!(
            "feature {:?} vs deg {:?} vs eps {:?}",
            f_t.dims(),
            deg.dims(),
            eps.dims()
        )));
    }
    let out: Vec<f32> = f_t
        .data()
        .iter()
        .zip(deg.data().iter().zip(eps.data().iter()))
        .map(|(&f, (&d, &e))| f - cd * d - ce * e)
        .collect();
    Ok(Tensor::from_raw(f_t.dims().to_vec(), out))
}

#[derive(Debug, Clone, Default)]
pub struct RestoreOptions {
    /// Subtract the full predicted degradation on every stride, exactly as
    /// printed; over-subtracts across multiple strides.
    pub literal_removal: bool,
    /// Keep the conditions built from the initially-noised features instead
    /// of rebuilding them from the current features each stride.
    pub fixed_conditions: bool,
}

#[derive(Debug, Clone)]
pub struct TracePoint {
    pub t: usize,
    pub features: HighFeatures,
}

#[derive(Debug, Clone)]
pub struct PredictionPair {
    pub deg3: Tensor,
    pub eps3: Tensor,
    pub deg4: Tensor,
    pub eps4: Tensor,
}

/// Full record of a reverse run: the feature state at every visited time
/// point (T first, 0 last), the per-stride predictions, and optionally the
/// per-point deviation norms filled in by the diagnostics.
#[derive(Debug, Clone)]
pub struct RestorationTrace {
    pub points: Vec<TracePoint>,
    pub predictions: Vec<PredictionPair>,
    pub deviations: Option<Vec<f64>>,
}

impl RestorationTrace {
    pub fn final_features(&self) -> &HighFeatures {
        &self.points.last().expect("trace never empty").features
    }
}

/// The noise used to initialize the reverse process for (seed, level);
/// exposed so oracles can reproduce it.
pub fn restore_noise(seed: u64, level: Level, dims: &[usize]) -> Tensor {
    let tag = match level {
        Level::L3 => "restore-eps-l3",
        Level::L4 => "restore-eps-l4",
    };
    rng::randn(&mut rng::stream(seed, tag, 0), dims)
}

/// Evenly spaced integer time points from T down to 0 in `strides` strides.
pub fn time_points(total: usize, strides: usize) -> Vec<usize> {
    if strides == 0 {
        return vec![total];
    }
    (0..=strides)
        .map(|i| ((total as f64) * ((strides - i) as f64) / strides as f64).round() as usize)
        .collect()
}

/// Runs the reverse process: noise the inputs fully, then iterate reverse
/// strides down to t = 0, rebuilding mutual conditions along the way.
pub fn restore(
    predictor: &dyn RestorePredictor,
    store: &ParameterStore,
    f_in: &HighFeatures,
    sched: &NoiseSchedule,
    steps: usize,
    seed: u64,
    opts: &RestoreOptions,
) -> Result<RestorationTrace> {
    if steps > sched.steps() {
        return Err(Error::InvalidArg(format!(
            "{steps} inference strides exceed schedule length {}",
            sched.steps()
        )));
    }
    let total = sched.steps();
    let top = sched.alpha_bar(total) as f32;
    let e3 = restore_noise(seed, Level::L3, f_in.l3.dims());
    let e4 = restore_noise(seed, Level::L4, f_in.l4.dims());
    let mut f3 = f_in.l3.zip_map(&e3, |f, e| f + top * e)?;
    let mut f4 = f_in.l4.zip_map(&e4, |f, e| f + top * e)?;
    let init = HighFeatures { l3: f3.clone(), l4: f4.clone() };

    let plan = time_points(total, steps);
    let mut trace = RestorationTrace {
        points: vec![TracePoint { t: total, features: init.clone() }],
        predictions: Vec::with_capacity(steps),
        deviations: None,
    };
    for w in plan.windows(2) {
        let (t_hi, t_lo) = (w[0], w[1]);
        let (src3, src4) = if opts.fixed_conditions {
            (&init.l3, &init.l4)
        } else {
            (&f3, &f4)
        };
        let c3 = build_conditions(src3, src4, Level::L3)?;
        let c4 = build_conditions(src3, src4, Level::L4)?;
        let (deg3, eps3) = predictor.predict(store, Level::L3, &f3, t_hi, total, &c3)?;
        let (deg4, eps4) = predictor.predict(store, Level::L4, &f4, t_hi, total, &c4)?;
        f3 = reverse_stride(&f3, t_hi, t_lo, &deg3, &eps3, sched, opts.literal_removal)?;
        f4 = reverse_stride(&f4, t_hi, t_lo, &deg4, &eps4, sched, opts.literal_removal)?;
        trace.predictions.push(PredictionPair { deg3, eps3, deg4, eps4 });
        trace.points.push(TracePoint {
            t: t_lo,
            features: HighFeatures { l3: f3.clone(), l4: f4.clone() },
        });
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::{build_schedule, ScheduleKind};

    fn pair(seed: u64) -> HighFeatures {
        HighFeatures {
            l3: rng::randn(&mut rng::stream(seed, "f3", 0), &[8, 4, 4]),
            l4: rng::randn(&mut rng::stream(seed, "f4", 0), &[16, 2, 2]),
        }
    }

    #[test]
    fn conditions_shapes_and_permutation() {
        let f = pair(1);
        let c3 = build_conditions(&f.l3, &f.l4, Level::L3).unwrap();
        assert_eq!(c3.c_mul.dims(), &[4, 4, 4]);
        let c4 = build_conditions(&f.l3, &f.l4, Level::L4).unwrap();
        assert_eq!(c4.c_mul.dims(), &[32, 2, 2]);
        // permutation: value multiset preserved
        let mut a: Vec<f32> = f.l4.data().to_vec();
        let mut b: Vec<f32> = c3.c_mul.data().to_vec();
        a.sort_by(f32::total_cmp);
        b.sort_by(f32::total_cmp);
        assert_eq!(a, b);
    }

    #[test]
    fn conditions_degenerate_equal_scale() {
        let l3 = rng::randn(&mut rng::stream(2, "a", 0), &[4, 4, 4]);
        let l4 = rng::randn(&mut rng::stream(2, "b", 0), &[4, 4, 4]);
        let c = build_conditions(&l3, &l4, Level::L3).unwrap();
        assert!(c.c_mul.bitwise_eq(&l4));
    }

    #[test]
    fn conditions_reject_non_factor_scales() {
        let l3 = Tensor::zeros(&[4, 6, 6]);
        let l4 = Tensor::zeros(&[4, 2, 2]);
        assert!(build_conditions(&l3, &l4, Level::L3).is_err());
    }

    #[test]
    fn shapes_example_256_at_4_to_64_at_8() {
        let l3 = Tensor::zeros(&[128, 8, 8]);
        let l4 = Tensor::zeros(&[256, 4, 4]);
        let c = build_conditions(&l3, &l4, Level::L3).unwrap();
        assert_eq!(c.c_mul.dims(), &[64, 8, 8]);
    }

    #[test]
    fn one_step_estimate_cancels_oracle_exactly() {
        let sched = build_schedule(6, ScheduleKind::Linear).unwrap();
        for t in [1usize, 3, 6] {
            let f_gt = rng::randn(&mut rng::stream(3, "gt", t as u64), &[4, 3, 3]);
            let deg = rng::randn(&mut rng::stream(3, "deg", t as u64), &[4, 3, 3]);
            let eps = rng::randn(&mut rng::stream(3, "eps", t as u64), &[4, 3, 3]);
            let a = sched.alpha_bar(t) as f32;
            let f_t = Tensor::from_raw(
                vec![4, 3, 3],
                f_gt.data()
                    .iter()
                    .zip(deg.data().iter().zip(eps.data().iter()))
                    .map(|(&g, (&d, &e))| g + d + a * e)
                    .collect(),
            );
            let est = one_step_estimate(&f_t, t, &deg, &eps, &sched, false).unwrap();
            assert!(est.max_abs_diff(&f_gt) < 1e-6, "t={t}");
        }
    }

    #[test]
    fn zero_predictions_leave_feature_unchanged() {
        let sched = build_schedule(4, ScheduleKind::Linear).unwrap();
        let f_t = rng::randn(&mut rng::stream(4, "f", 0), &[2, 2, 2]);
        let z = Tensor::zeros(&[2, 2, 2]);
        let est = one_step_estimate(&f_t, 2, &z, &z, &sched, false).unwrap();
        assert!(est.bitwise_eq(&f_t));
    }

    #[test]
    fn reverse_two_step_hand_arithmetic() {
        // T=2, beta_bar = t/T: F2=[1.2] -> F1=[1.1] -> F0=[1.0]
        let sched = build_schedule(2, ScheduleKind::Linear).unwrap();
        let deg = Tensor::new(vec![1], vec![0.4]).unwrap();
        let eps = Tensor::new(vec![1], vec![-0.2]).unwrap();
        let f2 = Tensor::new(vec![1], vec![1.2]).unwrap();
        let f1 = reverse_step(&f2, 2, &deg, &eps, &sched, false).unwrap();
        // (beta 1 - 0.5)*0.4 = 0.2 ; (1 - sqrt(.5)... careful: alpha_bar is linear: 1 - 0.5 = 0.5 -> 0.5*(-0.2) = -0.1
        assert!((f1.data()[0] - 1.1).abs() < 1e-6, "got {}", f1.data()[0]);
        let f0 = reverse_step(&f1, 1, &deg, &eps, &sched, false).unwrap();
        assert!((f0.data()[0] - 1.0).abs() < 1e-6, "got {}", f0.data()[0]);
        assert!(reverse_step(&f0, 0, &deg, &eps, &sched, false).is_err());
    }

    #[test]
    fn literal_mode_oversubtracts_constant_oracle() {
        // T=2 with a constant oracle degradation: the literal rule subtracts
        // it twice, ending at F_gt - F_deg.
        let sched = build_schedule(2, ScheduleKind::Linear).unwrap();
        let f_gt = Tensor::new(vec![2], vec![1.0, -2.0]).unwrap();
        let deg = Tensor::new(vec![2], vec![0.4, 0.3]).unwrap();
        let eps = Tensor::new(vec![2], vec![-0.2, 0.1]).unwrap();
        let f2 = Tensor::from_raw(
            vec![2],
            f_gt.data()
                .iter()
                .zip(deg.data().iter().zip(eps.data().iter()))
                .map(|(&g, (&d, &e))| g + d + e)
                .collect(),
        );
        let f1 = reverse_step(&f2, 2, &deg, &eps, &sched, true).unwrap();
        let f0 = reverse_step(&f1, 1, &deg, &eps, &sched, true).unwrap();
        let expect = f_gt.sub(&deg).unwrap();
        assert!(f0.max_abs_diff(&expect) < 1e-6);
        // divergence >= (T-1) * ||deg|| / T
        let err = f0.sub(&f_gt).unwrap().norm_l2();
        assert!(err >= deg.norm_l2() * 0.5 - 1e-9);
    }

    #[test]
    fn time_points_plans() {
        assert_eq!(time_points(6, 6), vec![6, 5, 4, 3, 2, 1, 0]);
        assert_eq!(time_points(6, 1), vec![6, 0]);
        assert_eq!(time_points(6, 2), vec![6, 3, 0]);
        assert_eq!(time_points(6, 0), vec![6]);
    }

    fn oracle_for(f_gt: &HighFeatures, f_in: &HighFeatures, seed: u64) -> OraclePredictor {
        OraclePredictor {
            deg3: f_in.l3.sub(&f_gt.l3).unwrap(),
            eps3: restore_noise(seed, Level::L3, f_in.l3.dims()),
            deg4: f_in.l4.sub(&f_gt.l4).unwrap(),
            eps4: restore_noise(seed, Level::L4, f_in.l4.dims()),
        }
    }

    #[test]
    fn oracle_restore_recovers_target_for_various_step_counts() {
        let store = ParameterStore::new();
        let f_gt = pair(10);
        let deg = HighFeatures {
            l3: rng::randn(&mut rng::stream(11, "d3", 0), &[8, 4, 4]).scale(0.5),
            l4: rng::randn(&mut rng::stream(11, "d4", 0), &[16, 2, 2]).scale(0.5),
        };
        let f_in = HighFeatures {
            l3: f_gt.l3.add(&deg.l3).unwrap(),
            l4: f_gt.l4.add(&deg.l4).unwrap(),
        };
        for total in [1usize, 2, 6] {
            let sched = build_schedule(total, ScheduleKind::Linear).unwrap();
            for steps in 1..=total {
                let oracle = oracle_for(&f_gt, &f_in, 99);
                let trace = restore(&oracle, &store, &f_in, &sched, steps, 99, &RestoreOptions::default()).unwrap();
                let out = trace.final_features();
                assert!(
                    out.l3.max_abs_diff(&f_gt.l3) < 1e-5 && out.l4.max_abs_diff(&f_gt.l4) < 1e-5,
                    "T={total} steps={steps}"
                );
                assert_eq!(trace.points.len(), steps + 1);
            }
        }
    }

    #[test]
    fn oracle_trace_distance_strictly_decreases() {
        let store = ParameterStore::new();
        let f_gt = pair(20);
        let f_in = HighFeatures {
            l3: f_gt.l3.map(|v| v + 0.3),
            l4: f_gt.l4.map(|v| v - 0.2),
        };
        let sched = build_schedule(6, ScheduleKind::Linear).unwrap();
        let oracle = oracle_for(&f_gt, &f_in, 7);
        let trace = restore(&oracle, &store, &f_in, &sched, 6, 7, &RestoreOptions::default()).unwrap();
        let mut last = f64::INFINITY;
        for p in &trace.points {
            let d = p.features.distance(&f_gt).unwrap();
            assert!(d < last, "distance did not decrease at t={}", p.t);
            last = d;
        }
        assert!(last < 1e-5);
    }

    #[test]
    fn restore_zero_steps_and_determinism() {
        let store = ParameterStore::new();
        let f_in = pair(30);
        let sched = build_schedule(6, ScheduleKind::Linear).unwrap();
        let oracle = oracle_for(&f_in, &f_in, 1);
        let t0 = restore(&oracle, &store, &f_in, &sched, 0, 1, &RestoreOptions::default()).unwrap();
        assert_eq!(t0.points.len(), 1);
        assert_eq!(t0.points[0].t, 6);
        let t1 = restore(&oracle, &store, &f_in, &sched, 3, 1, &RestoreOptions::default()).unwrap();
        let t2 = restore(&oracle, &store, &f_in, &sched, 3, 1, &RestoreOptions::default()).unwrap();
        for (a, b) in t1.points.iter().zip(t2.points.iter()) {
            assert!(a.features.l3.bitwise_eq(&b.features.l3));
            assert!(a.features.l4.bitwise_eq(&b.features.l4));
        }
    }

    #[test]
    fn restoration_net_zero_init_predicts_zero_and_is_deterministic() {
        let mut store = ParameterStore::new();
        let mut r = rng::stream(40, "rnet", 0);
        let net = RestorationNet::init(&mut store, "rnet.l3", 8, 4, 16, 8, 2, &mut r).unwrap();
        let restorer = Restorer { l3: net.clone(), l4: net };
        let f = rng::randn(&mut rng::stream(41, "f", 0), &[8, 4, 4]);
        let cond = ConditionMaps { c_mul: rng::randn(&mut rng::stream(41, "c", 0), &[4, 4, 4]) };
        let (deg, eps) = restorer.predict(&store, Level::L3, &f, 2, 6, &cond).unwrap();
        assert!(deg.data().iter().all(|&v| v == 0.0));
        assert!(eps.data().iter().all(|&v| v == 0.0));
        assert_eq!(deg.dims(), f.dims());
        // determinism across calls
        let (deg2, _) = restorer.predict(&store, Level::L3, &f, 2, 6, &cond).unwrap();
        assert!(deg.bitwise_eq(&deg2));
        // step range enforced
        assert!(restorer.predict(&store, Level::L3, &f, 7, 6, &cond).is_err());
    }
}
