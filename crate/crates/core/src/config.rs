//! Experiment configuration files (TOML).
//!
//! ```toml
//! output_dir = "runs"
//!
//! [dataset.synthetic]
//! seed = 7
//! num_classes = 5
//! images_per_class = 40
//! val_images_per_class = 10
//! height = 64
//! width = 64
//!
//! [schedule]
//! class_order = [1, 2, 3, 4, 5]
//! step_sizes = [3, 1, 1]
//! protocol = "overlapped"
//!
//! [train]
//! epochs_per_step = 5
//! ```
//!
//! Unknown keys are rejected; errors name the offending field path.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::arcl::ArclConfig;
use crate::dada::DadaParams;
use crate::dataset::SyntheticSpec;
use crate::dcpl::DcplConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::schedule::{build_schedule, ClassId, Protocol, TaskSchedule};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetConfig {
    Synthetic(SyntheticDataset),
    Voc(VocDataset),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticDataset {
    pub seed: u64,
    pub num_classes: usize,
    pub images_per_class: usize,
    pub val_images_per_class: usize,
    pub height: usize,
    pub width: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_radius: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_radius: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_shapes: Option<usize>,
}

impl SyntheticDataset {
    pub fn spec(&self, images_per_class: usize) -> SyntheticSpec {
        let mut spec = SyntheticSpec::new(self.num_classes, images_per_class, self.height, self.width);
        if let Some(r) = self.min_radius {
            spec.min_radius = r;
        }
        if let Some(r) = self.max_radius {
            spec.max_radius = r;
        }
        if let Some(n) = self.max_shapes {
            spec.max_shapes = n;
        }
        spec
    }

    /// Seed of the validation split, derived from the training seed.
    pub fn val_seed(&self) -> u64 {
        self.seed ^ 0x9e37_79b9_7f4a_7c15
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VocDataset {
    pub train_root: PathBuf,
    pub val_root: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub class_order: Vec<ClassId>,
    pub step_sizes: Vec<usize>,
    pub protocol: Protocol,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub base_lr: f64,
    /// Overrides `base_lr` for the initial step.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub initial_lr: Option<f64>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs_per_step: usize,
    /// Overrides `epochs_per_step` for the initial step.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub initial_epochs: Option<usize>,
    pub poly_power: f64,
    pub seed: u64,
    pub hflip: bool,
    /// Count background in the initial and all-class mIoU groups.
    pub eval_background: bool,
    pub dada: DadaParams,
    pub arcl: ArclConfig,
    pub dcpl: DcplConfig,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 0.01,
            initial_lr: None,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 8,
            epochs_per_step: 5,
            initial_epochs: None,
            poly_power: 0.9,
            seed: 0,
            hflip: true,
            eval_background: true,
            dada: DadaParams::default(),
            arcl: ArclConfig::default(),
            dcpl: DcplConfig::default(),
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn lr_for_step(&self, step: usize) -> f64 {
        match (step, self.initial_lr) {
            (0, Some(lr)) => lr,
            _ => self.base_lr,
        }
    }

    pub fn epochs_for_step(&self, step: usize) -> usize {
        match (step, self.initial_epochs) {
            (0, Some(e)) => e,
            _ => self.epochs_per_step,
        }
    }

    /// Plain fine-tuning: no distillation, no contrast, no pseudo labels.
    pub fn fine_tuning(mut self) -> Self {
        self.dada.intermediate = false;
        self.dada.output = false;
        self.arcl.enabled = false;
        self.dcpl.mode = crate::dcpl::PseudoLabelMode::None;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("train.base_lr", self.base_lr),
            ("train.initial_lr", self.initial_lr.unwrap_or(self.base_lr)),
            ("train.poly_power", self.poly_power),
        ];
        for (field, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(field, format!("must be positive, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("train.momentum", "must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("train.weight_decay", "must be >= 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be >= 1"));
        }
        if self.epochs_per_step == 0 || self.initial_epochs == Some(0) {
            return Err(Error::config("train.epochs_per_step", "must be >= 1"));
        }
        if !(self.dada.lambda_out >= 0.0) {
            return Err(Error::config("train.dada.lambda_out", "must be >= 0"));
        }
        if !(self.dada.alpha > 0.0) {
            return Err(Error::config("train.dada.alpha", "must be > 0"));
        }
        if !(self.dada.gamma > 0.0 && self.dada.gamma < 1.0) {
            return Err(Error::config("train.dada.gamma", "must lie in (0, 1)"));
        }
        self.arcl.validate()?;
        self.dcpl.validate()?;
        self.model.validate()
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let de = toml::Deserializer::new(text);
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let field = if path == "." { "<root>".to_string() } else { path };
            Error::config(field, e.into_inner().message().trim().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn build_schedule(&self) -> Result<TaskSchedule> {
        let s = &self.schedule;
        build_schedule(&s.class_order, &s.step_sizes, s.protocol).map_err(|e| match e {
            Error::ScheduleMismatch(m) => Error::config("schedule.step_sizes", m),
            other => Error::config("schedule.class_order", other.to_string()),
        })
    }

    pub fn validate(&self) -> Result<()> {
        let schedule = self.build_schedule()?;
        match &self.dataset {
            DatasetConfig::Synthetic(d) => {
                d.spec(d.images_per_class)
                    .validate()
                    .map_err(|e| Error::config("dataset.synthetic", e.to_string()))?;
                if d.val_images_per_class == 0 {
                    return Err(Error::config(
                        "dataset.synthetic.val_images_per_class",
                        "must be >= 1",
                    ));
                }
                if schedule.max_class_id() as usize > d.num_classes {
                    return Err(Error::config(
                        "schedule.class_order",
                        format!(
                            "class {} exceeds the {} synthetic classes",
                            schedule.max_class_id(),
                            d.num_classes
                        ),
                    ));
                }
                let stride = self.train.model.output_stride();
                if d.height % stride != 0 || d.width % stride != 0 {
                    return Err(Error::config(
                        "dataset.synthetic",
                        format!("image size must be divisible by {stride}"),
                    ));
                }
            }
            DatasetConfig::Voc(_) => {
                if schedule.max_class_id() > 255 {
                    return Err(Error::config(
                        "schedule.class_order",
                        "indexed masks hold class ids up to 255",
                    ));
                }
            }
        }
        self.train.validate()
    }

    /// Short content hash naming the run directory; the output location
    /// itself is not part of it.
    pub fn config_hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.output_dir = PathBuf::new();
        let json = serde_json::to_string(&canonical).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        hex::encode(&digest[..8])
    }
}
