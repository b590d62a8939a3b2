//! Depth evaluation: SiLog loss, the standard error/accuracy metric set,
//! range-bucketed variants, and a paired t-test whose Student-t CDF comes
//! from adaptive quadrature of the density.
//!
//! Metric reductions accumulate in f64 so the hand-computed oracle values
//! reproduce to six decimal places.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SILOG_LAMBDA: f64 = 0.85;
pub const SILOG_SCALE: f64 = 10.0;

fn masked_pairs<'a>(
    pred: &'a Tensor,
    gt: &'a Tensor,
    mask: &'a Tensor,
) -> Result<impl Iterator<Item = (f64, f64)> + 'a> {
    if pred.dims() != gt.dims() || pred.dims() != mask.dims() {
        return Err(Error::ShapeMismatch(format!(
            "pred {:?} vs gt {:?} vs mask {:?}",
            pred.dims(),
            gt.dims(),
            mask.dims()
        )));
    }
    Ok(pred
        .data()
        .iter()
        .zip(gt.data().iter())
        .zip(mask.data().iter())
        .filter(|(_, &m)| m > 0.0)
        .map(|((&p, &g), _)| (p as f64, g as f64)))
}

/// Scale-invariant log loss over masked pixels:
/// `10 * sqrt(mean(d^2) - 0.85 * mean(d)^2)` with `d = ln(pred) - ln(gt)`.
pub fn silog_loss(pred: &Tensor, gt: &Tensor, mask: &Tensor) -> Result<f64> {
    let mut n = 0usize;
    let mut sum = 0.0f64;
    let mut sum_sq = 0.0f64;
    for (p, g) in masked_pairs(pred, gt, mask)? {
        if p <= 0.0 || g <= 0.0 {
            return Err(Error::InvalidArg(format!(
                "silog needs positive depths on masked pixels, got pred {p}, gt {g}"
            )));
        }
        let d = p.ln() - g.ln();
        sum += d;
        sum_sq += d * d;
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptyMask("silog_loss".into()));
    }
    let nf = n as f64;
    let mean = sum / nf;
    let var_term = sum_sq / nf - SILOG_LAMBDA * mean * mean;
    Ok(SILOG_SCALE * var_term.max(0.0).sqrt())
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct MetricsReport {
    pub rmse: f64,
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse_log: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub pixels: usize,
}

/// The standard metric set over masked pixels.
pub fn depth_metrics(pred: &Tensor, gt: &Tensor, mask: &Tensor) -> Result<MetricsReport> {
    let mut n = 0usize;
    let (mut se, mut ar, mut sr, mut sl) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let (mut d1, mut d2, mut d3) = (0usize, 0usize, 0usize);
    for (p, g) in masked_pairs(pred, gt, mask)? {
        if p <= 0.0 || g <= 0.0 {
            return Err(Error::InvalidArg(
                "depth metrics need positive depths on masked pixels".into(),
            ));
        }
        let e = p - g;
        se += e * e;
        ar += e.abs() / g;
        sr += e * e / g;
        let dl = p.ln() - g.ln();
        sl += dl * dl;
        let ratio = (p / g).max(g / p);
        if ratio < 1.25 {
            d1 += 1;
        }
        if ratio < 1.25f64.powi(2) {
            d2 += 1;
        }
        if ratio < 1.25f64.powi(3) {
            d3 += 1;
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptyMask("depth_metrics".into()));
    }
    let nf = n as f64;
    Ok(MetricsReport {
        rmse: (se / nf).sqrt(),
        abs_rel: ar / nf,
        sq_rel: sr / nf,
        rmse_log: (sl / nf).sqrt(),
        delta1: d1 as f64 / nf,
        delta2: d2 as f64 / nf,
        delta3: d3 as f64 / nf,
        pixels: n,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct BucketReport {
    pub lo: f64,
    pub hi: f64,
    /// None when no masked pixel fell in the bucket.
    pub report: Option<MetricsReport>,
}

pub const DEFAULT_BUCKETS: [(f64, f64); 3] = [(0.0, 20.0), (20.0, 50.0), (50.0, 80.0)];

/// Metrics restricted to ground-truth depth buckets `[lo, hi)` (the last
/// bucket is closed above). Buckets must not overlap.
pub fn range_metrics(
    pred: &Tensor,
    gt: &Tensor,
    mask: &Tensor,
    buckets: &[(f64, f64)],
) -> Result<Vec<BucketReport>> {
    for (i, &(lo, hi)) in buckets.iter().enumerate() {
        if hi <= lo {
            return Err(Error::InvalidArg(format!("bucket {i} is empty: [{lo}, {hi})")));
        }
        for &(lo2, hi2) in &buckets[i + 1..] {
            if lo < hi2 && lo2 < hi {
                return Err(Error::InvalidArg(format!(
                    "buckets overlap: [{lo}, {hi}) and [{lo2}, {hi2})"
                )));
            }
        }
    }
    let last_hi = buckets.iter().map(|b| b.1).fold(f64::NEG_INFINITY, f64::max);
    let mut out = Vec::with_capacity(buckets.len());
    for &(lo, hi) in buckets {
        let in_bucket = |g: f64| g >= lo && (g < hi || (hi == last_hi && g <= hi));
        let bucket_mask = {
            let mut m = mask.clone();
            for (mv, &gv) in m.data_mut().iter_mut().zip(gt.data().iter()) {
                if *mv > 0.0 && !in_bucket(gv as f64) {
                    *mv = 0.0;
                }
            }
            m
        };
        let report = match depth_metrics(pred, gt, &bucket_mask) {
            Ok(r) => Some(r),
            Err(Error::EmptyMask(_)) => None,
            Err(e) => return Err(e),
        };
        out.push(BucketReport { lo, hi, report });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct TTestResult {
    pub n: usize,
    pub mean_diff: f64,
    pub t: f64,
    pub df: usize,
    /// One-sided p-value for H1 "errors of a are lower than b's"
    /// (left tail of the paired differences a - b).
    pub p: f64,
    pub degenerate: bool,
}

/// Paired one-sided t-test on per-image errors, H1: a < b.
pub fn paired_ttest(errors_a: &[f64], errors_b: &[f64]) -> Result<TTestResult> {
    if errors_a.len() != errors_b.len() {
        return Err(Error::ShapeMismatch(format!(
            "paired t-test needs equal lengths, got {} vs {}",
            errors_a.len(),
            errors_b.len()
        )));
    }
    let n = errors_a.len();
    if n < 2 {
        return Err(Error::InvalidArg("paired t-test needs n >= 2".into()));
    }
    let d: Vec<f64> = errors_a.iter().zip(errors_b.iter()).map(|(a, b)| a - b).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n as f64 - 1.0);
    let sd = var.sqrt();
    let df = n - 1;
    if sd == 0.0 {
        let (t, p) = if mean < 0.0 {
            (f64::NEG_INFINITY, 0.0)
        } else if mean > 0.0 {
            (f64::INFINITY, 1.0)
        } else {
            (0.0, 0.5)
        };
        return Ok(TTestResult { n, mean_diff: mean, t, df, p, degenerate: true });
    }
    let t = mean / (sd / (n as f64).sqrt());
    let p = student_t_cdf(t, df as f64);
    Ok(TTestResult { n, mean_diff: mean, t, df, p, degenerate: false })
}

/// P(T_df <= t) by adaptive Simpson integration of the density from 0 to |t|.
pub fn student_t_cdf(t: f64, df: f64) -> f64 {
    if t == 0.0 {
        return 0.5;
    }
    if t.is_infinite() {
        return if t > 0.0 { 1.0 } else { 0.0 };
    }
    let half = integrate_adaptive(|x| student_t_pdf(x, df), 0.0, t.abs(), 1e-12, 40);
    if t > 0.0 {
        0.5 + half
    } else {
        0.5 - half
    }
}

pub fn student_t_pdf(x: f64, df: f64) -> f64 {
    let log_norm = ln_gamma((df + 1.0) / 2.0)
        - ln_gamma(df / 2.0)
        - 0.5 * (df * std::f64::consts::PI).ln();
    (log_norm - 0.5 * (df + 1.0) * (1.0 + x * x / df).ln()).exp()
}

/// Upper critical value t* with P(T_df > t*) = alpha, by bisection.
pub fn student_t_critical(alpha: f64, df: f64) -> f64 {
    let target = 1.0 - alpha;
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    while student_t_cdf(hi, df) < target {
        hi *= 2.0;
        if hi > 1e6 {
            break;
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if student_t_cdf(mid, df) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

fn integrate_adaptive(f: impl Fn(f64) -> f64 + Copy, a: f64, b: f64, tol: f64, depth: u32) -> f64 {
    fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64) -> f64 {
        (b - a) / 6.0 * (f(a) + 4.0 * f(0.5 * (a + b)) + f(b))
    }
    fn recur(
        f: impl Fn(f64) -> f64 + Copy,
        a: f64,
        b: f64,
        whole: f64,
        tol: f64,
        depth: u32,
    ) -> f64 {
        let m = 0.5 * (a + b);
        let left = simpson(f, a, m);
        let right = simpson(f, m, b);
        if depth == 0 || (left + right - whole).abs() <= 15.0 * tol {
            left + right + (left + right - whole) / 15.0
        } else {
            recur(f, a, m, left, tol / 2.0, depth - 1)
                + recur(f, m, b, right, tol / 2.0, depth - 1)
        }
    }
    recur(f, a, b, simpson(f, a, b), tol, depth)
}

/// Lanczos approximation, g = 7.
#[allow(clippy::excessive_precision)]
fn ln_gamma(x: f64) -> f64 {
    const COEF: [f64; 8] = [
        676.5203681218851,
        -1259.1392167224028,
        771.32342877765313,
        -176.61502916214059,
        12.507343278686905,
        -0.13857109526572012,
        9.9843695780195716e-6,
        1.5056327351493116e-7,
    ];
    if x < 0.5 {
        // reflection
        std::f64::consts::PI.ln() - (std::f64::consts::PI * x).sin().ln() - ln_gamma(1.0 - x)
    } else {
        let x = x - 1.0;
        let mut acc = 0.99999999999980993;
        for (i, &c) in COEF.iter().enumerate() {
            acc += c / (x + i as f64 + 1.0);
        }
        let t = x + 7.5;
        0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
    }
}

// ---- CSV export ----

/// One row per (model, split, bucket) with the full metric set.
pub fn metrics_csv_header() -> String {
    "model,split,bucket,pixels,rmse,abs_rel,sq_rel,rmse_log,delta1,delta2,delta3\n".to_string()
}

pub fn metrics_csv_row(model: &str, split: &str, bucket: &str, r: &MetricsReport) -> String {
    format!(
        "{model},{split},{bucket},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
        r.pixels, r.rmse, r.abs_rel, r.sq_rel, r.rmse_log, r.delta1, r.delta2, r.delta3
    )
}

pub fn ttest_csv_header() -> String {
    "pair,n,t,df,p,verdict_0_05,verdict_0_01,degenerate\n".to_string()
}

pub fn ttest_csv_row(pair: &str, r: &TTestResult) -> String {
    format!(
        "{pair},{},{:.6},{},{:.6e},{},{},{}\n",
        r.n,
        r.t,
        r.df,
        r.p,
        if r.p < 0.05 { "reject_h0" } else { "keep_h0" },
        if r.p < 0.01 { "reject_h0" } else { "keep_h0" },
        r.degenerate
    )
}
