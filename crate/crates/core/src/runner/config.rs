//! Experiment configuration files (TOML, strict: unknown keys are errors).
//!
//! ```toml
//! [dataset]
//! train_fraction = 0.6667
//! shuffle_seed = 0
//! [dataset.gaussian_mixture]        # or [dataset.idx]
//! num_classes = 4
//! dim = 16
//! per_class = 750
//! class_separation = 3.0
//! noise_std = 1.0
//! seed = 0
//!
//! [model]
//! input_dim = 16
//! layer_widths = [64, 64, 4]
//! activation = "relu"
//!
//! [train]
//! epochs = 30
//! batch_size = 64
//! lr = 0.1
//! momentum = 0.9
//! lr_decay_epochs = [15, 23]
//! method = "edac"
//! [train.train_attack]
//! norm = "linf"
//! epsilon = 0.3
//! step_size = 0.075
//! steps = 10
//! [train.eval_attack]
//! norm = "linf"
//! epsilon = 0.3
//! step_size = 0.075
//! steps = 10
//!
//! [eval.pgd20]
//! norm = "linf"
//! epsilon = 0.3
//! step_size = 0.0375
//! steps = 20
//!
//! [output]
//! dir = "runs/example"
//! formats = ["csv", "json"]
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attack::AttackConfig;
use crate::data::{load_idx_images, make_gaussian_mixture, split, Dataset, GaussianMixture, SplitSpec};
use crate::error::{Error, Result};
use crate::netcore::ModelSpec;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxSource {
    pub images: PathBuf,
    pub labels: PathBuf,
    #[serde(default)]
    pub downsample_to: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub train_fraction: f64,
    #[serde(default)]
    pub shuffle_seed: u64,
    #[serde(default)]
    pub gaussian_mixture: Option<GaussianMixture>,
    #[serde(default)]
    pub idx: Option<IdxSource>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    Csv,
    Json,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
    #[serde(default = "default_formats")]
    pub formats: Vec<OutputFormat>,
}

fn default_formats() -> Vec<OutputFormat> {
    vec![OutputFormat::Csv, OutputFormat::Json]
}

impl OutputSection {
    pub fn wants(&self, f: OutputFormat) -> bool {
        self.formats.contains(&f)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradcheckSection {
    #[serde(default = "default_cases")]
    pub cases: usize,
    #[serde(default = "default_gc_batch")]
    pub batch_size: usize,
    #[serde(default = "default_steps")]
    pub h: Vec<f64>,
}

fn default_cases() -> usize {
    3
}

fn default_gc_batch() -> usize {
    4
}

fn default_steps() -> Vec<f64> {
    vec![1e-4, 1e-5, 1e-6]
}

impl Default for GradcheckSection {
    fn default() -> Self {
        GradcheckSection {
            cases: default_cases(),
            batch_size: default_gc_batch(),
            h: default_steps(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSection,
    pub model: ModelSpec,
    pub train: TrainConfig,
    /// Named evaluation attacks, reported in name order.
    #[serde(default)]
    pub eval: BTreeMap<String, AttackConfig>,
    pub output: OutputSection,
    #[serde(default)]
    pub gradcheck: GradcheckSection,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = ExperimentConfig::from_toml_str(&text)
            .map_err(|e| Error::config(format!("{}: {}", path.display(), strip_prefix(e))))?;
        // Relative data paths resolve against the config file's directory.
        if let (Some(idx), Some(base)) = (cfg.dataset.idx.as_mut(), path.parent()) {
            if idx.images.is_relative() {
                idx.images = base.join(&idx.images);
            }
            if idx.labels.is_relative() {
                idx.labels = base.join(&idx.labels);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.dataset;
        match (&d.gaussian_mixture, &d.idx) {
            (Some(_), Some(_)) | (None, None) => {
                return Err(Error::config(
                    "dataset: set exactly one of [dataset.gaussian_mixture] or [dataset.idx]",
                ))
            }
            _ => {}
        }
        if !(d.train_fraction > 0.0 && d.train_fraction < 1.0) {
            return Err(Error::config(format!(
                "dataset.train_fraction must lie in (0, 1), got {}",
                d.train_fraction
            )));
        }
        self.model.validate().map_err(|e| Error::config(format!("model: {}", strip_prefix(e))))?;
        self.train.validate().map_err(|e| Error::config(format!("train: {}", strip_prefix(e))))?;
        for (name, attack) in &self.eval {
            attack
                .validate()
                .map_err(|e| Error::config(format!("eval.{name}: {}", strip_prefix(e))))?;
        }
        if self.output.formats.is_empty() {
            return Err(Error::config("output.formats must name at least one format"));
        }
        let gc = &self.gradcheck;
        if gc.cases == 0 || gc.batch_size == 0 || gc.h.is_empty() || gc.h.iter().any(|h| h.is_nan() || *h <= 0.0) {
            return Err(Error::config("gradcheck: cases, batch_size and every h must be positive"));
        }
        Ok(())
    }

    /// Overrides the training seed and the model initialisation seed.
    pub fn override_seed(&mut self, seed: u64) {
        self.train.seed = seed;
        self.model.init_seed = seed;
    }

    /// Builds the dataset and splits it into train and test sides.
    pub fn datasets(&self) -> Result<(Dataset, Dataset)> {
        let d = &self.dataset;
        let full = if let Some(g) = &d.gaussian_mixture {
            make_gaussian_mixture(g)?
        } else if let Some(idx) = &d.idx {
            load_idx_images(&idx.images, &idx.labels, idx.downsample_to)?
        } else {
            unreachable!("validated: one dataset source is set")
        };
        if full.input_dim() != self.model.input_dim {
            return Err(Error::config(format!(
                "model.input_dim is {} but the dataset has {} features",
                self.model.input_dim,
                full.input_dim()
            )));
        }
        if full.num_classes > self.model.num_classes() {
            return Err(Error::config(format!(
                "the dataset has {} classes but the model outputs {}",
                full.num_classes,
                self.model.num_classes()
            )));
        }
        split(
            &full,
            &SplitSpec {
                train_fraction: d.train_fraction,
                shuffle_seed: d.shuffle_seed,
            },
        )
    }
}

fn strip_prefix(e: Error) -> String {
    match e {
        Error::Config(m) => m,
        other => other.to_string(),
    }
}
