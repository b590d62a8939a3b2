//! Experiment configuration: JSON files with strict (unknown-key rejecting)
//! parsing, flag overrides, and the resolved-config record written next to
//! every run's outputs.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::avlfe::AvlfeMode;
use crate::depthnet::{DecoderVariant, ModelShape};
use crate::diffusion::RestoreOptions;
use crate::error::{Error, Result};
use crate::schedule::{build_schedule, NoiseSchedule, ScheduleKind};
use crate::synthdata::{DatasetCounts, SceneSpec};
use crate::train::TrainHyper;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    #[serde(rename = "T")]
    pub t: usize,
    pub kind: ScheduleKind,
    pub literal_eq9: bool,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { t: 6, kind: ScheduleKind::Linear, literal_eq9: false }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        build_schedule(self.t, self.kind)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatOptSettings {
    pub steps: usize,
    pub lr: f32,
    pub proxy_steps: usize,
    pub proxy_lr: f32,
    /// Cap on how many test images the diagnostics sweep.
    pub max_images: usize,
}

impl Default for FeatOptSettings {
    fn default() -> Self {
        Self { steps: 50, lr: 1e-2, proxy_steps: 500, proxy_lr: 1e-2, max_images: 16 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub dataset_dir: String,
    pub out_dir: String,
    pub dataset: SceneSpec,
    pub counts: DatasetCounts,
    pub with_aux: bool,
    pub schedule: ScheduleConfig,
    pub model: ModelShape,
    pub decoder: DecoderVariant,
    pub avlfe: AvlfeMode,
    pub seed: u64,
    /// Reverse strides at inference.
    pub steps: usize,
    pub fixed_conditions: bool,
    pub train: TrainHyper,
    pub featopt: FeatOptSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset_dir: "data".into(),
            out_dir: "out".into(),
            dataset: SceneSpec::default(),
            counts: DatasetCounts::default(),
            with_aux: true,
            schedule: ScheduleConfig::default(),
            model: ModelShape::default(),
            decoder: DecoderVariant::Inv,
            avlfe: AvlfeMode::Off,
            seed: 0,
            steps: 6,
            fixed_conditions: false,
            train: TrainHyper::default(),
            featopt: FeatOptSettings::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| {
            Error::Config(format!("{}: {e}", path.as_ref().display()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        if self.schedule.t == 0 {
            return Err(Error::Config("schedule.T must be positive".into()));
        }
        if self.steps > self.schedule.t {
            return Err(Error::Config(format!(
                "steps ({}) exceed schedule.T ({})",
                self.steps, self.schedule.t
            )));
        }
        if self.train.batch == 0 {
            return Err(Error::Config("train.batch must be positive".into()));
        }
        if self.model.d_min <= 0.0 || self.model.d_max <= self.model.d_min {
            return Err(Error::Config("model depth range must satisfy 0 < d_min < d_max".into()));
        }
        Ok(())
    }

    pub fn restore_options(&self) -> RestoreOptions {
        RestoreOptions {
            literal_removal: self.schedule.literal_eq9,
            fixed_conditions: self.fixed_conditions,
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("config serialization: {e}")))?;
        std::fs::write(path, json)?;
        Ok(())
    }
}
