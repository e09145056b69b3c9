//! Declarative run configuration.
//!
//! One TOML file drives every subcommand. Sections mirror the pipeline
//! stages; unknown keys are rejected everywhere and every field has a
//! default, so an empty file is a valid desk-scale configuration.
//!
//! ```toml
//! seed = 0
//!
//! [sampler]
//! n_locations = 640
//! strategy = "gaussian"
//!
//! [learner]
//! epochs = 200
//! queue_size = 256
//!
//! [eval]
//! fractions = [0.01, 0.1, 0.5, 1.0]
//! ```

use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::encoder::EncoderConfig;
use crate::error::{Error, IoContext, Result};
use crate::eval::{ChangeConfig, ProbeConfig, TargetKind};
use crate::geosampler::{
    default_land_boxes, BuildOptions, LandBox, SamplingStrategy, DEFAULT_MAX_CLOUD, DEFAULT_TOP_CITIES,
    DEFAULT_WINDOW_DAYS,
};
use crate::learner::{LearnerConfig, TrainConfig};
use crate::views::AugmentationConfig;

/// Which tile source `sample` reads from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CatalogKind {
    Synthetic,
    /// Pre-downloaded tiles in `sampler.catalog_dir`.
    Local,
}

/// Where downstream labels come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelSource {
    /// Latent land-cover histograms of a sampled synthetic dataset.
    Synthetic,
    /// A folder dataset with `dataset.toml`, `train.csv` and `val.csv`.
    Folder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerSection {
    pub n_locations: usize,
    pub sigma_km: f64,
    pub max_cloud: f64,
    pub window_days: i64,
    /// Maximum backward shift of the reference date.
    pub jitter_days: u32,
    pub strategy: SamplingStrategy,
    /// Cities CSV (`name,lat,lon,population`); generated cities when unset.
    pub cities_path: Option<PathBuf>,
    pub top_cities: usize,
    /// Number of generated cities when `cities_path` is unset.
    pub synthetic_cities: usize,
    pub catalog: CatalogKind,
    pub catalog_dir: Option<PathBuf>,
    pub world_seed: u64,
    pub patch_size: usize,
    /// Concentrate land-cover diversity around the cities.
    pub anchored: bool,
    pub today: NaiveDate,
    pub max_attempts: usize,
    pub land_boxes: Vec<LandBox>,
}

impl Default for SamplerSection {
    fn default() -> Self {
        Self {
            n_locations: 640,
            sigma_km: 50.0,
            max_cloud: DEFAULT_MAX_CLOUD,
            window_days: DEFAULT_WINDOW_DAYS,
            jitter_days: 365,
            strategy: SamplingStrategy::Gaussian,
            cities_path: None,
            top_cities: DEFAULT_TOP_CITIES,
            synthetic_cities: 40,
            catalog: CatalogKind::Synthetic,
            catalog_dir: None,
            world_seed: 7,
            patch_size: 64,
            anchored: true,
            today: NaiveDate::from_ymd_opt(2021, 3, 1).expect("valid date"),
            max_attempts: 1000,
            land_boxes: default_land_boxes(),
        }
    }
}

/// Learner and optimizer settings in one flat table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LearnerSection {
    pub encoder: EncoderConfig,
    pub proj_dim: usize,
    pub queue_size: usize,
    pub temperature: f64,
    pub key_momentum: f64,
    pub multi_positive_z0: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub milestones: Vec<f64>,
    pub lr_decay: f64,
    pub checkpoint_every: usize,
}

impl Default for LearnerSection {
    /// Desk-scale defaults: a micro encoder (about 4k parameters with 8-d
    /// sub-spaces), a small queue and a faster key encoder suit a few
    /// thousand steps on a few hundred locations.
    fn default() -> Self {
        let l = LearnerConfig::default();
        let t = TrainConfig::default();
        Self {
            encoder: EncoderConfig {
                widths: vec![8, 12, 16],
                blocks: vec![0, 0, 0],
                groups: 4,
            },
            proj_dim: 8,
            queue_size: 256,
            temperature: 0.2,
            key_momentum: 0.99,
            multi_positive_z0: l.multi_positive_z0,
            epochs: 200,
            batch_size: 32,
            base_lr: 0.1,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            milestones: t.milestones,
            lr_decay: t.lr_decay,
            checkpoint_every: 25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub epochs: usize,
    pub batch_size: usize,
    /// Adam learning rate; 1e-3 for linear probing, 1e-5 for fine-tuning when unset.
    pub lr: Option<f64>,
    pub weight_decay: f64,
    pub milestones: Vec<f64>,
    pub lr_decay: f64,
    pub standardize: bool,
    /// Label fractions for `sweep`.
    pub fractions: Vec<f64>,
    /// Probe repeats; the reported value is the median.
    pub seeds: usize,
    pub labels: LabelSource,
    pub target_kind: TargetKind,
    /// Share of synthetic locations held out for validation.
    pub val_fraction: f64,
    pub change: ChangeConfig,
    /// Side of the synthetic change pairs in pixels.
    pub change_size: usize,
    pub change_pairs: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        let p = ProbeConfig::default();
        Self {
            epochs: p.epochs,
            batch_size: p.batch_size,
            lr: p.lr,
            weight_decay: p.weight_decay,
            milestones: p.milestones,
            lr_decay: p.lr_decay,
            standardize: p.standardize,
            fractions: vec![0.01, 0.1, 0.5, 1.0],
            seeds: 3,
            labels: LabelSource::Synthetic,
            target_kind: TargetKind::MultiLabel,
            val_fraction: 0.2,
            change: ChangeConfig::default(),
            change_size: 192,
            change_pairs: 1,
        }
    }
}

/// Artifact locations, relative to the working directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IoSection {
    pub data_dir: PathBuf,
    pub pretrain_dir: PathBuf,
    pub eval_dir: PathBuf,
    /// Encoder checkpoint for evaluation; `pretrain_dir/checkpoint.ckpt` when unset.
    pub checkpoint: Option<PathBuf>,
    /// Labeled data for evaluation; `data_dir` when unset.
    pub labels_dir: Option<PathBuf>,
}

impl Default for IoSection {
    fn default() -> Self {
        Self {
            data_dir: "data/stacks".into(),
            pretrain_dir: "runs/pretrain".into(),
            eval_dir: "runs/eval".into(),
            checkpoint: None,
            labels_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
#[derive(Default)]
pub struct RunConfig {
    pub seed: u64,
    pub sampler: SamplerSection,
    pub views: AugmentationConfig,
    pub learner: LearnerSection,
    pub eval: EvalSection,
    pub io: IoSection,
}


impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).at(path)?;
        Self::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    /// Writes the resolved config next to an artifact.
    pub fn echo_to(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).at(dir)?;
        let path = dir.join("config.toml");
        std::fs::write(&path, self.to_toml_string()).at(path)
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.sampler;
        if s.n_locations == 0 || s.patch_size == 0 || s.max_attempts == 0 {
            return Err(Error::Config("sampler n_locations, patch_size and max_attempts must be positive".into()));
        }
        if !(s.sigma_km > 0.0) || !(s.max_cloud > 0.0 && s.max_cloud <= 1.0) || s.window_days < 0 {
            return Err(Error::Config("sampler sigma_km > 0, max_cloud in (0, 1], window_days >= 0 required".into()));
        }
        if s.cities_path.is_none() && s.synthetic_cities == 0 {
            return Err(Error::Config("sampler needs cities_path or synthetic_cities > 0".into()));
        }
        if s.catalog == CatalogKind::Local && s.catalog_dir.is_none() {
            return Err(Error::Config("local catalog needs sampler.catalog_dir".into()));
        }
        if s.strategy == SamplingStrategy::Uniform && s.land_boxes.is_empty() {
            return Err(Error::Config("uniform sampling needs land_boxes".into()));
        }
        self.views.validate()?;
        self.learner_config().validate()?;
        self.train_config().validate()?;
        let e = &self.eval;
        self.probe_config(0).validate()?;
        if e.fractions.iter().any(|&f| !(f > 0.0 && f <= 1.0)) {
            return Err(Error::Config("eval fractions must lie in (0, 1]".into()));
        }
        if e.seeds == 0 || e.change_pairs == 0 || e.change_size == 0 {
            return Err(Error::Config("eval seeds, change_pairs and change_size must be positive".into()));
        }
        if !(e.val_fraction > 0.0 && e.val_fraction < 1.0) {
            return Err(Error::Config("eval val_fraction must lie in (0, 1)".into()));
        }
        Ok(())
    }

    pub fn build_options(&self) -> BuildOptions {
        let s = &self.sampler;
        BuildOptions {
            n_locations: s.n_locations,
            strategy: s.strategy,
            sigma_km: s.sigma_km,
            max_cloud: s.max_cloud,
            window_days: s.window_days,
            jitter_days: s.jitter_days,
            today: s.today,
            seed: self.seed,
            land_boxes: s.land_boxes.clone(),
            max_attempts: s.max_attempts,
        }
    }

    pub fn learner_config(&self) -> LearnerConfig {
        let l = &self.learner;
        LearnerConfig {
            encoder: l.encoder.clone(),
            proj_dim: l.proj_dim,
            queue_size: l.queue_size,
            temperature: l.temperature,
            key_momentum: l.key_momentum,
            multi_positive_z0: l.multi_positive_z0,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let l = &self.learner;
        TrainConfig {
            epochs: l.epochs,
            batch_size: l.batch_size,
            base_lr: l.base_lr,
            momentum: l.momentum,
            weight_decay: l.weight_decay,
            milestones: l.milestones.clone(),
            lr_decay: l.lr_decay,
            checkpoint_every: l.checkpoint_every,
            seed: self.seed,
        }
    }

    /// Probe settings for the `repeat`-th seed.
    pub fn probe_config(&self, repeat: u64) -> ProbeConfig {
        let e = &self.eval;
        ProbeConfig {
            epochs: e.epochs,
            batch_size: e.batch_size,
            lr: e.lr,
            weight_decay: e.weight_decay,
            milestones: e.milestones.clone(),
            lr_decay: e.lr_decay,
            standardize: e.standardize,
            seed: self.seed.wrapping_add(repeat),
        }
    }

    pub fn change_config(&self) -> ChangeConfig {
        ChangeConfig {
            seed: self.seed,
            ..self.eval.change.clone()
        }
    }

    /// Published pre-training scale: 1M locations, 200 epochs at batch 256,
    /// a 16,384-entry queue and key momentum 0.999. Validated but never run
    /// at desk scale.
    pub fn paper_scale() -> Self {
        let l = LearnerConfig::default();
        let t = TrainConfig::default();
        let mut cfg = RunConfig::default();
        cfg.sampler.n_locations = 1_000_000;
        cfg.sampler.patch_size = 265;
        cfg.views.out_size = 224;
        cfg.learner = LearnerSection {
            encoder: l.encoder,
            proj_dim: l.proj_dim,
            queue_size: l.queue_size,
            temperature: l.temperature,
            key_momentum: l.key_momentum,
            multi_positive_z0: l.multi_positive_z0,
            epochs: t.epochs,
            batch_size: t.batch_size,
            base_lr: t.base_lr,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            milestones: t.milestones,
            lr_decay: t.lr_decay,
            checkpoint_every: t.checkpoint_every,
        };
        cfg
    }
}
