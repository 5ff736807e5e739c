//! Run configuration for `svsnet train`.
//!
//! ```toml
//! output_dir = "runs/pw_r"
//!
//! [model]
//! mode = "regression"          # or "classification"
//! repr_source = "weighted_sum" # or "last_layer"
//! use_adapter = true
//!
//! [training]
//! epochs = 30
//! seed = 0
//! selection_metric = "system_lcc"
//!
//! [data]
//! train_manifest = "train.jsonl"
//! train_repr_dir = "reprs"
//! valid_manifest = "valid.jsonl"
//! valid_repr_dir = "reprs"
//! ```
//!
//! Relative paths resolve against the directory holding the config file.
//! Without a validation manifest the training set is split with
//! `train_fraction` using the training seed.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use svsnet_core::model::{DEFAULT_ADAPTER_DIM, DEFAULT_HIDDEN_DIM};
use svsnet_core::train::{DEFAULT_BATCH_SIZE, DEFAULT_EPOCHS, DEFAULT_LEARNING_RATE};
use svsnet_core::{Mode, ModelConfig, ReprSource, SelectionMetric, TrainConfig};

pub const DEFAULT_TRAIN_FRACTION: f64 = 0.8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub training: TrainingSection,
    pub data: DataSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub mode: Mode,
    pub repr_source: ReprSource,
    pub use_adapter: bool,
    pub adapter_dim: usize,
    pub hidden_dim: usize,
    /// Filled in from the data when absent; checked against it when given.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub num_layers: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dim: Option<usize>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            mode: Mode::Regression,
            repr_source: ReprSource::WeightedSum,
            use_adapter: true,
            adapter_dim: DEFAULT_ADAPTER_DIM,
            hidden_dim: DEFAULT_HIDDEN_DIM,
            num_layers: None,
            dim: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(alias = "lr")]
    pub learning_rate: f64,
    pub seed: u64,
    pub selection_metric: SelectionMetric,
}

impl Default for TrainingSection {
    fn default() -> Self {
        Self {
            epochs: DEFAULT_EPOCHS,
            batch_size: DEFAULT_BATCH_SIZE,
            learning_rate: DEFAULT_LEARNING_RATE,
            seed: 0,
            selection_metric: SelectionMetric::SystemLcc,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub train_manifest: PathBuf,
    pub train_repr_dir: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub valid_manifest: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub valid_repr_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_fraction: Option<f64>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        cfg.check()?;
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let join = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        join(&mut self.output_dir);
        join(&mut self.data.train_manifest);
        join(&mut self.data.train_repr_dir);
        if let Some(p) = self.data.valid_manifest.as_mut() {
            join(p);
        }
        if let Some(p) = self.data.valid_repr_dir.as_mut() {
            join(p);
        }
    }

    /// Structural checks that need no data on disk. Fills the split
    /// fraction default when no validation manifest is given.
    fn check(&mut self) -> Result<()> {
        let data = &mut self.data;
        match (&data.valid_manifest, data.train_fraction) {
            (Some(_), Some(_)) => {
                bail!("give either data.valid_manifest or data.train_fraction, not both")
            }
            (Some(_), None) => {
                if data.valid_repr_dir.is_none() {
                    data.valid_repr_dir = Some(data.train_repr_dir.clone());
                }
            }
            (None, fraction) => {
                if data.valid_repr_dir.is_some() {
                    bail!("data.valid_repr_dir given without data.valid_manifest");
                }
                data.train_fraction = Some(fraction.unwrap_or(DEFAULT_TRAIN_FRACTION));
            }
        }
        self.train_config().validate()?;
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.training;
        TrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            seed: t.seed,
            selection_metric: t.selection_metric,
        }
    }

    /// Model config for data of shape `(num_layers, dim)`. Records the
    /// shape so the resolved config is complete.
    pub fn model_config(&mut self, num_layers: usize, dim: usize) -> Result<ModelConfig> {
        let m = &mut self.model;
        for (name, given, found) in [
            ("num_layers", m.num_layers, num_layers),
            ("dim", m.dim, dim),
        ] {
            if let Some(g) = given {
                if g != found {
                    bail!("model.{name} = {g} but the representation files have {found}");
                }
            }
        }
        m.num_layers = Some(num_layers);
        m.dim = Some(dim);
        let cfg = ModelConfig::new(m.mode, m.repr_source, m.use_adapter, num_layers, dim)
            .with_widths(m.adapter_dim, m.hidden_dim);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }
}
