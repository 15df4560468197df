//! Declarative experiment files.

use std::path::{Path, PathBuf};

use patholab_core::detect::{DaMix, TrainSchedule};
use patholab_core::objectives::GradPenaltyConfig;
use patholab_core::phantom::ClassMix;
use patholab_core::progressive::ProgressiveConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub objective: ObjectiveConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub da: DaConfig,
    #[serde(default)]
    pub detector: DetectorConfig,
}

/// Phantom scenes to generate, or an existing bundle to read.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bundle: Option<PathBuf>,
    pub count: usize,
    pub size: usize,
    pub min_lesions: usize,
    pub max_lesions: usize,
    pub class_mix: [f64; 3],
    /// Train, validation and test fractions.
    pub splits: [f64; 3],
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            bundle: None,
            count: 64,
            size: 32,
            min_lesions: 1,
            max_lesions: 2,
            class_mix: ClassMix::default().0,
            splits: [0.6, 0.2, 0.2],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Pggan,
    Cpggan,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub family: Family,
    pub base: usize,
    pub width_divisor: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            family: Family::Pggan,
            base: 4,
            width_divisor: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectiveConfig {
    pub lambda_gp: f64,
    pub critic_iters: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub label_flip_period: Option<u64>,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        let gp = GradPenaltyConfig::default();
        Self {
            lambda_gp: gp.lambda_gp,
            critic_iters: gp.critic_iters,
            label_flip_period: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        let p = ProgressiveConfig::pggan(32, 1);
        Self {
            learning_rate: p.learning_rate,
            beta1: p.beta1,
            beta2: p.beta2,
            batch: p.batch,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub steps_per_stage: u64,
    pub fade_fraction: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps_per_stage: 125,
            fade_fraction: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DaConfig {
    pub classic: bool,
    pub gan: bool,
    pub ratio: f64,
    /// Bundle of synthesized slices used as the GAN pool.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<PathBuf>,
}

impl Default for DaConfig {
    fn default() -> Self {
        Self {
            classic: false,
            gan: false,
            ratio: 0.0,
            synthetic: None,
        }
    }
}

impl DaConfig {
    pub fn mix(&self) -> DaMix {
        DaMix {
            classic: self.classic,
            gan: self.gan,
            ratio: self.ratio,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    pub grid: usize,
    pub steps: u64,
    pub batch: usize,
    pub learning_rate: f64,
    pub eval_every: u64,
    pub iou_threshold: f64,
    pub score_threshold: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        let t = TrainSchedule::default();
        Self {
            grid: 8,
            steps: t.steps,
            batch: t.batch,
            learning_rate: t.learning_rate,
            eval_every: t.eval_every,
            iou_threshold: t.iou_threshold,
            score_threshold: t.select_score_threshold,
        }
    }
}

fn field(name: &str, msg: impl std::fmt::Display) -> CliError {
    CliError::User(format!("{name}: {msg}"))
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::User(format!("config: {}", e.to_string().trim_end())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::User(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical serialization.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(field("schema_version", format!("expected {SCHEMA_VERSION}, got {}", self.schema_version)));
        }
        let d = &self.dataset;
        if d.bundle.is_none() && d.count < 3 {
            return Err(field("dataset.count", "need at least 3 scenes to split"));
        }
        if !d.size.is_power_of_two() || d.size < 8 {
            return Err(field("dataset.size", format!("must be a power of two >= 8, got {}", d.size)));
        }
        if d.min_lesions > d.max_lesions {
            return Err(field("dataset.min_lesions", "exceeds dataset.max_lesions"));
        }
        ClassMix(d.class_mix).validate().map_err(|e| field("dataset.class_mix", e))?;
        if d.splits.iter().any(|&s| !(0.0..=1.0).contains(&s)) || (d.splits.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(field("dataset.splits", format!("fractions must lie in [0, 1] and sum to 1, got {:?}", d.splits)));
        }
        if self.model.base < 4 || !self.model.base.is_power_of_two() || self.model.base > d.size {
            return Err(field("model.base", format!("must be a power of two in [4, dataset.size], got {}", self.model.base)));
        }
        if self.model.width_divisor == 0 {
            return Err(field("model.width_divisor", "must be positive"));
        }
        GradPenaltyConfig {
            lambda_gp: self.objective.lambda_gp,
            critic_iters: self.objective.critic_iters,
        }
        .validate()
        .map_err(|e| field("objective", e))?;
        if self.objective.label_flip_period == Some(0) {
            return Err(field("objective.label_flip_period", "must be positive"));
        }
        let o = &self.optimizer;
        if !(o.learning_rate > 0.0 && o.learning_rate.is_finite()) {
            return Err(field("optimizer.learning_rate", format!("must be positive, got {}", o.learning_rate)));
        }
        for (name, b) in [("optimizer.beta1", o.beta1), ("optimizer.beta2", o.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(field(name, format!("must lie in [0, 1), got {b}")));
            }
        }
        if o.batch == 0 {
            return Err(field("optimizer.batch", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.schedule.fade_fraction) {
            return Err(field("schedule.fade_fraction", format!("must lie in [0, 1], got {}", self.schedule.fade_fraction)));
        }
        if !(self.da.ratio >= 0.0 && self.da.ratio.is_finite()) {
            return Err(field("da.ratio", format!("must be non-negative, got {}", self.da.ratio)));
        }
        if self.da.gan && self.da.synthetic.is_none() {
            return Err(field("da.synthetic", "required when da.gan is enabled"));
        }
        let t = &self.detector;
        if t.grid == 0 || d.size % t.grid != 0 {
            return Err(field("detector.grid", format!("must divide dataset.size {}, got {}", d.size, t.grid)));
        }
        if t.batch == 0 || !(t.learning_rate > 0.0) {
            return Err(field("detector", "batch and learning_rate must be positive"));
        }
        for (name, v) in [("detector.iou_threshold", t.iou_threshold), ("detector.score_threshold", t.score_threshold)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(field(name, format!("must lie in [0, 1], got {v}")));
            }
        }
        Ok(())
    }

    pub fn progressive(&self) -> ProgressiveConfig {
        let conditional = self.model.family == Family::Cpggan;
        let defaults = if conditional {
            ProgressiveConfig::cpggan(self.dataset.size, self.schedule.steps_per_stage)
        } else {
            ProgressiveConfig::pggan(self.dataset.size, self.schedule.steps_per_stage)
        };
        ProgressiveConfig {
            base: self.model.base,
            fade_fraction: self.schedule.fade_fraction,
            width_divisor: self.model.width_divisor,
            batch: self.optimizer.batch,
            learning_rate: self.optimizer.learning_rate,
            beta1: self.optimizer.beta1,
            beta2: self.optimizer.beta2,
            gp: GradPenaltyConfig {
                lambda_gp: self.objective.lambda_gp,
                critic_iters: self.objective.critic_iters,
            },
            label_flip_period: self.objective.label_flip_period,
            seed: self.seed,
            ..defaults
        }
    }

    pub fn train_schedule(&self) -> TrainSchedule {
        let t = &self.detector;
        TrainSchedule {
            steps: t.steps,
            batch: t.batch,
            learning_rate: t.learning_rate,
            eval_every: t.eval_every,
            iou_threshold: t.iou_threshold,
            select_score_threshold: t.score_threshold,
            seed: self.seed,
            ..TrainSchedule::default()
        }
    }
}
