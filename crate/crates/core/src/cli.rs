//! Subcommand implementations behind the `rdepth` binary. Each run resolves
//! its configuration (file plus flag overrides), produces artifacts under
//! the output directory, and records the resolved config and a manifest of
//! files it wrote. Identical config and seed give bit-identical outputs.

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::avlfe::AvlfeMode;
use crate::config::ExperimentConfig;
use crate::depthnet::{write_pgm16, DecoderVariant};
use crate::error::{Error, Result};
use crate::featopt::{
    deviation_csv_header, deviation_csv_rows, featopt_csv_header, featopt_csv_rows,
    measure_deviation, optimize_features, proxy_gt_feature,
};
use crate::io::{load_checkpoint, save_checkpoint, save_tensor};
use crate::metrics::{self, metrics_csv_header, metrics_csv_row, ttest_csv_header, ttest_csv_row};
use crate::model::{DepthPipeline, ModelDescriptor, Stage};
use crate::params::ParameterStore;
use crate::synthdata::{generate_dataset, Dataset, Split};
use crate::train::{evaluate, train_stage, EvalMode, TrainLog};

#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub steps: Option<usize>,
    pub decoder: Option<DecoderVariant>,
    pub avlfe: Option<AvlfeMode>,
    pub literal_eq9: bool,
    pub out: Option<String>,
}

/// File config (or defaults) with flag overrides applied.
pub fn resolve_config(ov: &Overrides) -> Result<ExperimentConfig> {
    let mut cfg = match &ov.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = ov.seed {
        cfg.seed = seed;
    }
    if let Some(steps) = ov.steps {
        cfg.steps = steps;
    }
    if let Some(decoder) = ov.decoder {
        cfg.decoder = decoder;
    }
    if let Some(avlfe) = ov.avlfe {
        cfg.avlfe = avlfe;
    }
    if ov.literal_eq9 {
        cfg.schedule.literal_eq9 = true;
    }
    if let Some(out) = &ov.out {
        cfg.out_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub files: Vec<String>,
}

fn finish_run(cfg: &ExperimentConfig, command: &str, files: Vec<String>) -> Result<RunManifest> {
    let out = Path::new(&cfg.out_dir);
    std::fs::create_dir_all(out)?;
    cfg.save(out.join(format!("{command}_config.json")))?;
    let manifest = RunManifest { command: command.to_string(), files };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Config(format!("manifest serialization: {e}")))?;
    std::fs::write(out.join(format!("{command}_manifest.json")), json)?;
    Ok(manifest)
}

fn descriptor_path(cfg: &ExperimentConfig) -> PathBuf {
    Path::new(&cfg.out_dir).join("model.json")
}

fn ckpt_path(cfg: &ExperimentConfig, stage: Stage) -> PathBuf {
    let name = match stage {
        Stage::Pretrain => "stage_a.ckpt",
        Stage::Diffusion => "stage_b.ckpt",
        Stage::Avlfe => "stage_c.ckpt",
    };
    Path::new(&cfg.out_dir).join(name)
}

fn save_model(cfg: &ExperimentConfig, store: &ParameterStore, stage: Stage) -> Result<PathBuf> {
    std::fs::create_dir_all(&cfg.out_dir)?;
    let path = ckpt_path(cfg, stage);
    save_checkpoint(store, &path)?;
    let desc = ModelDescriptor { shape: cfg.model.clone(), variant: cfg.decoder };
    let json = serde_json::to_string_pretty(&desc)
        .map_err(|e| Error::Config(format!("descriptor serialization: {e}")))?;
    std::fs::write(descriptor_path(cfg), json)?;
    Ok(path)
}

/// Loads the pipeline around a specific checkpoint file.
pub fn load_model(cfg: &ExperimentConfig, ckpt: &Path) -> Result<(DepthPipeline, ParameterStore)> {
    if !ckpt.exists() {
        return Err(Error::Config(format!(
            "missing checkpoint `{}`; run the prerequisite training stage first",
            ckpt.display()
        )));
    }
    let text = std::fs::read_to_string(descriptor_path(cfg))?;
    let desc: ModelDescriptor = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("model descriptor parse: {e}")))?;
    let store = load_checkpoint(ckpt)?;
    let pipeline = DepthPipeline::from_store(&desc, &store)?;
    Ok((pipeline, store))
}

/// Newest trained checkpoint: enhancement > diffusion > pretrain.
pub fn default_ckpt(cfg: &ExperimentConfig) -> Result<PathBuf> {
    for stage in [Stage::Avlfe, Stage::Diffusion, Stage::Pretrain] {
        let p = ckpt_path(cfg, stage);
        if p.exists() {
            return Ok(p);
        }
    }
    Err(Error::Config(format!(
        "no checkpoint under `{}`; train a model first",
        cfg.out_dir
    )))
}

fn open_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    Dataset::open(&cfg.dataset_dir).map_err(|_| {
        Error::Config(format!(
            "dataset not found under `{}`; run gen-data first",
            cfg.dataset_dir
        ))
    })
}

pub fn cmd_gen_data(cfg: &ExperimentConfig) -> Result<RunManifest> {
    generate_dataset(&cfg.dataset, &cfg.counts, cfg.with_aux, &cfg.dataset_dir)?;
    finish_run(
        cfg,
        "gen-data",
        vec![format!("{}/manifest.json", cfg.dataset_dir)],
    )
}

fn write_log(cfg: &ExperimentConfig, name: &str, log: &TrainLog) -> Result<String> {
    let path = Path::new(&cfg.out_dir).join(name);
    let json = serde_json::to_string_pretty(log)
        .map_err(|e| Error::Config(format!("log serialization: {e}")))?;
    std::fs::write(&path, json)?;
    Ok(path.display().to_string())
}

pub fn cmd_pretrain(cfg: &ExperimentConfig) -> Result<RunManifest> {
    let ds = open_dataset(cfg)?;
    let sched = cfg.schedule.build()?;
    let mut store = ParameterStore::new();
    let pipeline = DepthPipeline::init(&mut store, &cfg.model, cfg.decoder, cfg.seed)?;
    let log = train_stage(
        &pipeline,
        &mut store,
        &ds,
        Stage::Pretrain,
        &cfg.train,
        &sched,
        &cfg.restore_options(),
        AvlfeMode::Off,
        cfg.seed,
    )?;
    let ckpt = save_model(cfg, &store, Stage::Pretrain)?;
    let log_file = write_log(cfg, "pretrain_log.json", &log)?;
    finish_run(cfg, "pretrain", vec![ckpt.display().to_string(), log_file])
}

pub fn cmd_train_diffusion(cfg: &ExperimentConfig) -> Result<RunManifest> {
    let ds = open_dataset(cfg)?;
    let sched = cfg.schedule.build()?;
    let (pipeline, mut store) = load_model(cfg, &ckpt_path(cfg, Stage::Pretrain))?;
    let log = train_stage(
        &pipeline,
        &mut store,
        &ds,
        Stage::Diffusion,
        &cfg.train,
        &sched,
        &cfg.restore_options(),
        AvlfeMode::Off,
        cfg.seed,
    )?;
    let ckpt = save_model(cfg, &store, Stage::Diffusion)?;
    let log_file = write_log(cfg, "train_diffusion_log.json", &log)?;
    finish_run(cfg, "train-diffusion", vec![ckpt.display().to_string(), log_file])
}

pub fn cmd_train_avlfe(cfg: &ExperimentConfig) -> Result<RunManifest> {
    if cfg.avlfe == AvlfeMode::Off {
        return Err(Error::Config(
            "train-avlfe needs avlfe mode `compatible` or `full`".into(),
        ));
    }
    let ds = open_dataset(cfg)?;
    let sched = cfg.schedule.build()?;
    let (pipeline, mut store) = load_model(cfg, &ckpt_path(cfg, Stage::Diffusion))?;
    let log = train_stage(
        &pipeline,
        &mut store,
        &ds,
        Stage::Avlfe,
        &cfg.train,
        &sched,
        &cfg.restore_options(),
        cfg.avlfe,
        cfg.seed,
    )?;
    let ckpt = save_model(cfg, &store, Stage::Avlfe)?;
    let log_file = write_log(cfg, "train_avlfe_log.json", &log)?;
    finish_run(cfg, "train-avlfe", vec![ckpt.display().to_string(), log_file])
}

pub fn cmd_infer(cfg: &ExperimentConfig, ckpt: Option<PathBuf>) -> Result<RunManifest> {
    let ds = open_dataset(cfg)?;
    let sched = cfg.schedule.build()?;
    let ckpt = match ckpt {
        Some(p) => p,
        None => default_ckpt(cfg)?,
    };
    let (pipeline, store) = load_model(cfg, &ckpt)?;
    let out = Path::new(&cfg.out_dir).join("infer");
    std::fs::create_dir_all(&out)?;
    let mut files = Vec::new();
    let mut trace_csv = String::from("image,point,t,l3_norm,l4_norm\n");
    for &idx in &ds.indices(Split::Test) {
        let sample = ds.load(idx)?;
        let (depth, trace) = pipeline.infer(
            &store,
            &sample.image,
            &sched,
            cfg.steps,
            cfg.seed ^ idx as u64,
            &cfg.restore_options(),
            cfg.avlfe,
            sample.aux_image.as_ref(),
        )?;
        let tnsr = out.join(format!("depth_{idx:06}.tnsr"));
        let pgm = out.join(format!("depth_{idx:06}.pgm"));
        save_tensor(depth.values(), &tnsr)?;
        write_pgm16(depth.values(), &pgm)?;
        for (pt, point) in trace.points.iter().enumerate() {
            trace_csv.push_str(&format!(
                "{idx},{pt},{},{:.6},{:.6}\n",
                point.t,
                point.features.l3.norm_l2(),
                point.features.l4.norm_l2()
            ));
        }
        files.push(tnsr.display().to_string());
        files.push(pgm.display().to_string());
    }
    let trace_path = out.join("traces.csv");
    std::fs::write(&trace_path, trace_csv)?;
    files.push(trace_path.display().to_string());
    finish_run(cfg, "infer", files)
}

pub fn cmd_eval(
    cfg: &ExperimentConfig,
    mode: EvalMode,
    split: Split,
    ckpt: Option<PathBuf>,
) -> Result<RunManifest> {
    let ds = open_dataset(cfg)?;
    let sched = cfg.schedule.build()?;
    let ckpt = match ckpt {
        Some(p) => p,
        None => match mode {
            EvalMode::Baseline => ckpt_path(cfg, Stage::Pretrain),
            EvalMode::Diffusion => default_ckpt(cfg)?,
        },
    };
    let (pipeline, store) = load_model(cfg, &ckpt)?;
    let eval = evaluate(
        &pipeline,
        &store,
        &ds,
        split,
        mode,
        &sched,
        cfg.steps,
        cfg.seed,
        &cfg.restore_options(),
        cfg.avlfe,
    )?;
    let tag = match mode {
        EvalMode::Baseline => "baseline",
        EvalMode::Diffusion => "diffusion",
    };
    let out = Path::new(&cfg.out_dir);
    std::fs::create_dir_all(out)?;

    let mut metrics_csv = metrics_csv_header();
    metrics_csv.push_str(&metrics_csv_row(tag, &split.to_string(), "all", &eval.mean));
    for b in &eval.buckets {
        if b.images > 0 {
            let bucket = format!("{}-{}", b.lo, b.hi);
            let partial = metrics::MetricsReport {
                rmse: b.mean_rmse,
                abs_rel: f64::NAN,
                sq_rel: f64::NAN,
                rmse_log: f64::NAN,
                delta1: f64::NAN,
                delta2: f64::NAN,
                delta3: f64::NAN,
                pixels: b.pixels,
            };
            metrics_csv.push_str(&format!(
                "{tag},{split},{bucket},{},{:.6},,,,,,\n",
                partial.pixels, partial.rmse
            ));
        }
    }
    let metrics_path = out.join(format!("eval_{tag}_{split}_metrics.csv"));
    std::fs::write(&metrics_path, metrics_csv)?;

    let mut per_image = String::from("entry,rmse,silog\n");
    for item in &eval.items {
        per_image.push_str(&format!("{},{:.6},{:.6}\n", item.entry, item.rmse, item.silog));
    }
    let per_image_path = out.join(format!("eval_{tag}_{split}_per_image.csv"));
    std::fs::write(&per_image_path, per_image)?;

    finish_run(
        cfg,
        &format!("eval-{tag}"),
        vec![metrics_path.display().to_string(), per_image_path.display().to_string()],
    )
}

pub fn cmd_featopt(cfg: &ExperimentConfig) -> Result<RunManifest> {
    let ds = open_dataset(cfg)?;
    let (pipeline, store) = load_model(cfg, &ckpt_path(cfg, Stage::Pretrain))?;
    let out = Path::new(&cfg.out_dir);
    std::fs::create_dir_all(out)?;
    let mut csv = featopt_csv_header();
    let indices = ds.indices(Split::Test);
    for &idx in indices.iter().take(cfg.featopt.max_images) {
        let sample = ds.load(idx)?;
        for level in 1..=4 {
            let curve = optimize_features(
                &pipeline,
                &store,
                &sample,
                level,
                cfg.featopt.steps,
                cfg.featopt.lr,
            )?;
            csv.push_str(&featopt_csv_rows(idx, &curve));
        }
    }
    let path = out.join("featopt.csv");
    std::fs::write(&path, csv)?;
    finish_run(cfg, "featopt", vec![path.display().to_string()])
}

pub fn cmd_deviation(cfg: &ExperimentConfig, ckpt: Option<PathBuf>) -> Result<RunManifest> {
    let ds = open_dataset(cfg)?;
    let sched = cfg.schedule.build()?;
    let ckpt = match ckpt {
        Some(p) => p,
        None => default_ckpt(cfg)?,
    };
    let (pipeline, store) = load_model(cfg, &ckpt)?;
    let out = Path::new(&cfg.out_dir);
    std::fs::create_dir_all(out)?;
    let mut csv = deviation_csv_header();
    let indices = ds.indices(Split::Test);
    for &idx in indices.iter().take(cfg.featopt.max_images) {
        let sample = ds.load(idx)?;
        let proxy = proxy_gt_feature(
            &pipeline,
            &store,
            &sample,
            cfg.featopt.proxy_steps,
            cfg.featopt.proxy_lr,
        )?;
        let (dev, _) = measure_deviation(
            &pipeline,
            &store,
            &sample,
            &proxy,
            &sched,
            cfg.steps,
            cfg.seed ^ idx as u64,
            &cfg.restore_options(),
        )?;
        csv.push_str(&deviation_csv_rows(idx, &dev));
    }
    let path = out.join("deviation.csv");
    std::fs::write(&path, csv)?;
    finish_run(cfg, "deviation", vec![path.display().to_string()])
}

/// Parses the per-image CSVs written by `eval` and pairs rows by entry.
pub fn read_per_image_csv(path: &Path) -> Result<Vec<(usize, f64)>> {
    let text = std::fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (ln, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split(',');
        let entry: usize = parts
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Config(format!("{}:{}: bad entry", path.display(), ln + 1)))?;
        let rmse: f64 = parts
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Config(format!("{}:{}: bad rmse", path.display(), ln + 1)))?;
        rows.push((entry, rmse));
    }
    rows.sort_by_key(|r| r.0);
    Ok(rows)
}

pub fn cmd_ttest(cfg: &ExperimentConfig, a: &Path, b: &Path) -> Result<RunManifest> {
    let rows_a = read_per_image_csv(a)?;
    let rows_b = read_per_image_csv(b)?;
    if rows_a.len() != rows_b.len()
        || rows_a.iter().zip(rows_b.iter()).any(|(x, y)| x.0 != y.0)
    {
        return Err(Error::InvalidArg(
            "per-image CSVs do not cover the same entries".into(),
        ));
    }
    let ea: Vec<f64> = rows_a.iter().map(|r| r.1).collect();
    let eb: Vec<f64> = rows_b.iter().map(|r| r.1).collect();
    let result = metrics::paired_ttest(&ea, &eb)?;
    let out = Path::new(&cfg.out_dir);
    std::fs::create_dir_all(out)?;
    let mut csv = ttest_csv_header();
    let pair = format!(
        "{}_vs_{}",
        a.file_stem().unwrap_or_default().to_string_lossy(),
        b.file_stem().unwrap_or_default().to_string_lossy()
    );
    csv.push_str(&ttest_csv_row(&pair, &result));
    let path = out.join("ttest.csv");
    std::fs::write(&path, csv)?;
    println!(
        "paired t-test {pair}: n={}, t={:.4}, p={:.6} ({})",
        result.n,
        result.t,
        result.p,
        if result.p < 0.05 { "significant at 0.05" } else { "not significant at 0.05" }
    );
    finish_run(cfg, "ttest", vec![path.display().to_string()])
}
