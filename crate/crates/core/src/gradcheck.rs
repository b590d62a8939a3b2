//! Central finite-difference verification of analytic gradients.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::params::ParameterStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub eps: f32,
    pub rel_tol: f64,
    /// Minimum absolute tolerance.
    pub abs_floor: f64,
    /// Coordinates sampled per parameter (all coordinates if the parameter
    /// is smaller).
    pub coords_per_param: usize,
    pub seed: u64,
    /// Raise the absolute floor to a bound on f32 finite-difference noise,
    /// `32 * eps_f32 * max|loss| / (2 * eps)` (a few ulps of the loss per
    /// evaluation, amplified by the division). The configured floor stays
    /// in force as the minimum. A genuinely wrong gradient errs on the order
    /// of the gradient itself and still fails by a wide margin.
    pub noise_aware_floor: bool,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            eps: 1e-3,
            rel_tol: 1e-3,
            abs_floor: 1e-6,
            coords_per_param: 64,
            seed: 0x9e3779b9,
            noise_aware_floor: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub coords_checked: usize,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub per_param: Vec<ParamCheck>,
    pub max_rel_err: f64,
    pub pass: bool,
    /// Set when the check could not be carried out (e.g. non-finite loss).
    pub failure: Option<String>,
}

/// Evaluation of the function under test: scalar loss, plus analytic
/// gradients by parameter name when `want_grads` was set.
pub type LossEval = (f32, BTreeMap<String, Tensor>);

/// Compares analytic gradients of `f` against central finite differences
/// over a seeded subsample of coordinates per trainable parameter.
///
/// The relative error of a coordinate uses the denominator
/// `max(|analytic|, |numeric|, abs_floor / rel_tol)`, so `pass` is exactly
/// `max_rel_err < rel_tol` while tiny gradients are still compared against
/// the absolute floor.
pub fn grad_check(
    store: &ParameterStore,
    f: impl Fn(&ParameterStore, bool) -> Result<LossEval>,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let (base_loss, analytic) = f(store, true)?;
    if !base_loss.is_finite() {
        return Ok(fail_report(format!("loss at base point is {base_loss}")));
    }

    let mut per_param = Vec::new();
    let mut max_rel_err = 0.0f64;
    let mut worst_abs_loss = base_loss.abs() as f64;

    for name in store.trainable_names() {
        let Some(grad) = analytic.get(&name) else {
            // Parameter unused by this loss; nothing to compare.
            continue;
        };
        let numel = store.get(&name)?.numel();
        let coords: Vec<usize> = if numel <= cfg.coords_per_param {
            (0..numel).collect()
        } else {
            let mut rng =
                ChaCha8Rng::seed_from_u64(cfg.seed ^ fnv1a(name.as_bytes()));
            (0..cfg.coords_per_param)
                .map(|_| rng.gen_range(0..numel))
                .collect()
        };

        let mut param_max = 0.0f64;
        for &idx in &coords {
            let orig = store.get(&name)?.data()[idx];
            let plus = eval_perturbed(store, &f, &name, idx, orig + cfg.eps)?;
            let minus = eval_perturbed(store, &f, &name, idx, orig - cfg.eps)?;
            if !plus.is_finite() || !minus.is_finite() {
                return Ok(fail_report(format!(
                    "non-finite loss while perturbing `{name}`[{idx}]"
                )));
            }
            worst_abs_loss = worst_abs_loss.max(plus.abs() as f64).max(minus.abs() as f64);
            let numeric = (plus as f64 - minus as f64) / (2.0 * cfg.eps as f64);
            let a = grad.data()[idx] as f64;
            if !a.is_finite() {
                return Ok(fail_report(format!(
                    "non-finite analytic gradient for `{name}`[{idx}]"
                )));
            }
            let floor = effective_floor(cfg, worst_abs_loss);
            let denom = a.abs().max(numeric.abs()).max(floor / cfg.rel_tol);
            param_max = param_max.max((a - numeric).abs() / denom);
        }
        max_rel_err = max_rel_err.max(param_max);
        per_param.push(ParamCheck {
            name,
            max_rel_err: param_max,
            coords_checked: coords.len(),
        });
    }

    Ok(GradCheckReport {
        per_param,
        max_rel_err,
        pass: max_rel_err < cfg.rel_tol,
        failure: None,
    })
}

fn effective_floor(cfg: &GradCheckConfig, max_abs_loss: f64) -> f64 {
    if cfg.noise_aware_floor {
        let noise = 32.0 * f32::EPSILON as f64 * max_abs_loss / (2.0 * cfg.eps as f64);
        cfg.abs_floor.max(noise)
    } else {
        cfg.abs_floor
    }
}

fn eval_perturbed(
    store: &ParameterStore,
    f: &impl Fn(&ParameterStore, bool) -> Result<LossEval>,
    name: &str,
    idx: usize,
    value: f32,
) -> Result<f32> {
    let mut perturbed = store.clone();
    let mut t = perturbed.get(name)?.clone();
    t.data_mut()[idx] = value;
    perturbed.update(name, t)?;
    Ok(f(&perturbed, false)?.0)
}

fn fail_report(msg: String) -> GradCheckReport {
    GradCheckReport {
        per_param: Vec::new(),
        max_rel_err: f64::INFINITY,
        pass: false,
        failure: Some(msg),
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}
