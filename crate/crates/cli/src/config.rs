//! Run configuration file and the pieces resolved from it.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

use sdmcl::continual::{ContinualConfig, ModelSpec, RegularizerConfig};
use sdmcl::data_io::{parse_embeddings, parse_idx, LabeledDataset};
use sdmcl::numerics::Real;
use sdmcl::optimizers::OptimizerConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "format", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        valid_images: PathBuf,
        valid_labels: PathBuf,
    },
    Embeddings {
        train: PathBuf,
        valid: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TasksSection {
    #[serde(default = "two")]
    pub classes_per_task: usize,
    pub epochs_per_task: usize,
    #[serde(default = "zero_seed")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub shuffle_classes: bool,
    #[serde(default = "batch")]
    pub batch_size: usize,
    #[serde(default = "one_usize")]
    pub eval_every: usize,
    #[serde(default)]
    pub track_activity: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainSection {
    /// Defaults to the main training set.
    #[serde(default)]
    pub data: Option<DataSource>,
    pub epochs: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSpec,
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub regularizer: Option<RegularizerConfig>,
    pub data: DataSource,
    pub tasks: TasksSection,
    #[serde(default)]
    pub pretrain: Option<PretrainSection>,
    #[serde(default)]
    pub oracle: bool,
    /// Run seeds one after another even when `--jobs` asks for more.
    #[serde(default)]
    pub deterministic: bool,
    #[serde(default = "results_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub precision: Precision,
}

fn one_usize() -> usize {
    1
}

fn two() -> usize {
    2
}

fn batch() -> usize {
    128
}

fn zero_seed() -> Vec<u64> {
    vec![0]
}

fn results_dir() -> PathBuf {
    PathBuf::from("results")
}

impl RunConfig {
    /// Reads, parses and validates a config; relative paths are resolved
    /// against the config file's directory.
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: RunConfig =
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.data.resolve(base);
        if let Some(d) = cfg.pretrain.as_mut().and_then(|p| p.data.as_mut()) {
            d.resolve(base);
        }
        if cfg.output_dir.is_relative() {
            cfg.output_dir = base.join(&cfg.output_dir);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if self.tasks.seeds.is_empty() {
            bail!("at least one seed is required");
        }
        for seed in &self.tasks.seeds {
            self.continual_config(*seed).validate()?;
        }
        Ok(())
    }

    pub fn continual_config(&self, seed: u64) -> ContinualConfig {
        ContinualConfig {
            model: self.model.clone(),
            optimizer: self.optimizer,
            regularizer: self.regularizer,
            classes_per_task: self.tasks.classes_per_task,
            epochs_per_task: self.tasks.epochs_per_task,
            batch_size: self.tasks.batch_size,
            shuffle_classes: self.tasks.shuffle_classes,
            pretrain_epochs: self.pretrain.as_ref().map_or(0, |p| p.epochs),
            oracle: self.oracle,
            eval_every: self.tasks.eval_every,
            seed,
            track_activity: self.tasks.track_activity,
        }
    }
}

impl DataSource {
    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match self {
            Self::Idx {
                train_images,
                train_labels,
                valid_images,
                valid_labels,
            } => {
                fix(train_images);
                fix(train_labels);
                fix(valid_images);
                fix(valid_labels);
            }
            Self::Embeddings { train, valid } => {
                fix(train);
                fix(valid);
            }
        }
    }

    /// Loads (train, validation), each L2-normalized per sample.
    pub fn load<T: Real>(&self) -> anyhow::Result<(LabeledDataset<T>, LabeledDataset<T>)> {
        let (mut train, mut valid) = match self {
            Self::Idx {
                train_images,
                train_labels,
                valid_images,
                valid_labels,
            } => (
                parse_idx(train_images, train_labels)?,
                parse_idx(valid_images, valid_labels)?,
            ),
            Self::Embeddings { train, valid } => (parse_embeddings(train)?, parse_embeddings(valid)?),
        };
        train.normalize_l2();
        valid.normalize_l2();
        Ok((train, valid))
    }
}
