//! Run configuration: one TOML file covering every stage. Defaults are the
//! published protocol; unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baselines::BaselineConfig;
use crate::checksum::fnv1a64;
use crate::design::CellGeometry;
use crate::error::{Error, Result};
use crate::gan::{critic_architecture, generator_architecture, GanTrainingConfig};
use crate::nn::Activation;
use crate::oracle::ORACLE_VERSION;
use crate::screening::ScreeningCriteria;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub size: usize,
    pub train_fraction: f64,
    pub folds: usize,
    pub path: PathBuf,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            size: 300,
            train_fraction: 0.9,
            folds: 10,
            path: PathBuf::from("data/dataset.fpcd"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelPaths {
    pub gan: PathBuf,
    pub mlp: PathBuf,
    pub cnn: PathBuf,
}

impl Default for ModelPaths {
    fn default() -> Self {
        ModelPaths {
            gan: PathBuf::from("models/gan.fpcm"),
            mlp: PathBuf::from("models/mlp.fpcm"),
            cnn: PathBuf::from("models/cnn.fpcm"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScreeningSection {
    pub pool_size: usize,
    pub top_k: usize,
    pub criteria: ScreeningCriteria,
}

impl Default for ScreeningSection {
    fn default() -> Self {
        ScreeningSection {
            pool_size: 500,
            top_k: 5,
            criteria: ScreeningCriteria::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed; every model and pool seed is taken from it.
    pub seed: u64,
    pub oracle_version: String,
    pub geometry: CellGeometry,
    pub dataset: DatasetSection,
    pub models: ModelPaths,
    pub gan: GanTrainingConfig,
    pub mlp: BaselineConfig,
    pub cnn: BaselineConfig,
    pub screening: ScreeningSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            oracle_version: ORACLE_VERSION.to_string(),
            geometry: CellGeometry::default(),
            dataset: DatasetSection::default(),
            models: ModelPaths::default(),
            gan: GanTrainingConfig::default(),
            mlp: BaselineConfig::default(),
            cnn: BaselineConfig::default(),
            screening: ScreeningSection::default(),
        }
        .with_seed(0)
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let seed = c.seed;
        let c = c.with_seed(seed);
        c.check()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable")
    }

    /// Sets the master seed and propagates it to every trainer.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.gan.seed = seed;
        self.mlp.seed = seed;
        self.cnn.seed = seed;
        self
    }

    pub fn check(&self) -> Result<()> {
        if self.oracle_version != ORACLE_VERSION {
            return Err(Error::VersionMismatch {
                expected: self.oracle_version.clone(),
                found: ORACLE_VERSION.to_string(),
            });
        }
        self.geometry.check()?;
        if self.dataset.size == 0 || !(self.dataset.train_fraction > 0.0 && self.dataset.train_fraction < 1.0) {
            return Err(Error::Config("dataset size must be positive and train_fraction in (0, 1)".into()));
        }
        if self.dataset.folds < 2 {
            return Err(Error::Config("cross-validation needs at least 2 folds".into()));
        }
        if self.screening.pool_size == 0 || self.screening.top_k == 0 {
            return Err(Error::Config("pool_size and top_k must be positive".into()));
        }
        self.gan.check()?;
        self.mlp.check()?;
        self.cnn.check()?;
        self.screening.criteria.check()
    }

    /// The training-protocol values as `key=value` lines, in a fixed order.
    pub fn protocol_summary(&self) -> String {
        let gen = generator_architecture();
        let critic = critic_architecture(self.gan.conditional_critic);
        let critic_out = match critic.activations.last() {
            Some(Activation::Sigmoid) => "sigmoid",
            _ => "other",
        };
        let lines = [
            format!("dataset_size={}", self.dataset.size),
            format!("train_fraction={}", self.dataset.train_fraction),
            format!("folds={}", self.dataset.folds),
            format!("iterations={}", self.gan.iterations),
            format!("batch_size={}", self.gan.batch_size),
            format!("lr={}", self.gan.lr),
            format!("weight_decay={}", self.gan.weight_decay),
            format!("bn_momentum={}", self.gan.bn_momentum),
            format!("generator={:?}", gen.dims),
            format!("critic={:?}", critic.dims),
            format!("critic_output={critic_out}"),
            format!("pool_size={}", self.screening.pool_size),
        ];
        lines.join("\n")
    }

    pub fn protocol_fingerprint(&self) -> u64 {
        fnv1a64(self.protocol_summary().as_bytes())
    }
}

/// Checked-in copy of the defaults, shipped as `configs/default.toml`.
pub fn default_toml() -> String {
    RunConfig::default().to_toml()
}
