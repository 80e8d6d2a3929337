//! Run configuration document (TOML). Every section is optional; unknown keys
//! are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, IoContext, Result};
use crate::synth::CoverageMatrix;
use crate::trainer::{ModelConfig, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Directory holding one subdirectory per dataset.
    pub root: PathBuf,
    pub samples_per_dataset: usize,
    /// Size of the held-out evaluation split generated per dataset.
    pub eval_samples: usize,
    pub seed: u64,
    pub coverage: CoverageMatrix,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: PathBuf::from("data"),
            samples_per_dataset: 64,
            eval_samples: 16,
            seed: 0,
            coverage: CoverageMatrix::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub output_dir: Option<PathBuf>,
}

impl RunConfig {
    /// Settings sized for a CPU smoke run.
    pub fn toy() -> Self {
        Self {
            model: ModelConfig::toy(),
            train: TrainConfig::toy(),
            data: DataConfig { samples_per_dataset: 32, eval_samples: 8, ..DataConfig::default() },
            output_dir: None,
        }
    }

    pub fn from_toml(s: &str) -> Result<Self> {
        let c: RunConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path).at(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.data.coverage.validate()?;
        if self.data.samples_per_dataset == 0 {
            return Err(Error::Config("samples_per_dataset must be positive".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form of the resolved configuration.
    pub fn hash(&self) -> Result<String> {
        let v = serde_json::to_value(self)?;
        Ok(hex::encode(Sha256::digest(serde_json::to_vec(&v)?)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip() {
        let c = RunConfig::toy();
        let s = c.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&s).unwrap(), c);
        assert_eq!(c.hash().unwrap(), RunConfig::from_toml(&s).unwrap().hash().unwrap());
    }

    #[test]
    fn partial_and_unknown_keys() {
        let c = RunConfig::from_toml("[train]\nlearning_rate = 0.01\neffective_batch = 4\ngrad_accum = 2\nstage1_steps = 1\nstage2_steps = 1\nsingle_task_steps = 1\nseed = 3\ncheckpoint_every = 0\n[train.mask]\nstrategy = \"argmax\"\nrho = 0.5\n[train.sampling.task_weights]\ndepth = 1.0\n").unwrap();
        assert_eq!(c.train.seed, 3);
        assert!(RunConfig::from_toml("[model]\nbogus = 1\n").is_err());
        assert!(RunConfig::from_toml("nonsense = true\n").is_err());
    }
}
