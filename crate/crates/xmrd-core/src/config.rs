//! Run configuration: one TOML file drives the whole pipeline. Every field
//! has a default, so an empty file is a valid configuration; unknown keys
//! are rejected rather than ignored.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cca::Regularization;
use crate::dataset::ProtocolMode;
use crate::error::Result;
use crate::eval::Scenario;
use crate::nn::LayerSpec;
use crate::train::{ModelArch, TrainConfig};
use crate::util::{atomic_write, sha256_hex};

/// Environment variable overriding the default output directory.
pub const OUT_DIR_ENV: &str = "XMRD_OUT_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Train-split dataset file (JSONL). Default `data/train.jsonl`.
    pub train_data: PathBuf,
    /// Test-split dataset file (JSONL). Default `data/test.jsonl`.
    pub test_data: PathBuf,
    /// Artifact directory; the `XMRD_OUT_DIR` environment variable
    /// overrides this default when the field is absent. Default `runs`.
    pub out_dir: PathBuf,
    /// Encoder architecture shared by training and encoding.
    pub arch: ModelArch,
    /// Optimizer, loss weights, schedule, strategy, stage, and seed.
    pub train: TrainConfig,
    /// Words below this corpus count stay out of the dictionary. Default 1.
    pub dictionary_min_count: usize,
    /// Covariance ridge for CCA. Default `{ trace_scaled = 1e-4 }`.
    pub cca_regularization: Regularization,
    /// Gallery/query pose relation. Default `across_pose`.
    pub protocol_mode: ProtocolMode,
    /// Scenarios evaluated by default. Default: all five.
    pub scenarios: Vec<Scenario>,
    /// Seeds for multi-seed experiments. Default `[0, 1, 2, 3, 4]`.
    pub seeds: Vec<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let out_dir = std::env::var_os(OUT_DIR_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("runs"));
        RunConfig {
            train_data: PathBuf::from("data/train.jsonl"),
            test_data: PathBuf::from("data/test.jsonl"),
            out_dir,
            arch: default_arch(),
            train: TrainConfig::default(),
            dictionary_min_count: 1,
            cca_regularization: Regularization::default(),
            protocol_mode: ProtocolMode::AcrossPose,
            scenarios: Scenario::ALL.to_vec(),
            seeds: vec![0, 1, 2, 3, 4],
        }
    }
}

/// Desk-scale default: a small dense body, the mandatory two-dense vision
/// head, and a two-conv language branch, both ending in 16 features.
pub fn default_arch() -> ModelArch {
    ModelArch {
        vision_input: 16,
        vision: vec![
            LayerSpec::Dense { units: 32 },
            LayerSpec::BatchNorm,
            LayerSpec::Relu,
            LayerSpec::Dense { units: 24 },
            LayerSpec::BatchNorm,
            LayerSpec::Relu,
            LayerSpec::Dropout { keep_prob: 0.25 },
            LayerSpec::Dense { units: 16 },
            LayerSpec::BatchNorm,
        ],
        language: vec![
            LayerSpec::Conv1dK3 { channels: 32 },
            LayerSpec::BatchNorm,
            LayerSpec::Relu,
            LayerSpec::Conv1dK3 { channels: 16 },
            LayerSpec::GlobalAvgPool { masked: true },
        ],
        l_max: 12,
        e_dim: 16,
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| crate::error::Error::Config {
            reason: format!("cannot serialize configuration: {e}"),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, self.to_toml()?.as_bytes())
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.seeds.is_empty() {
            return Err(crate::error::Error::Config {
                reason: "seeds must not be empty".into(),
            });
        }
        if self.scenarios.is_empty() {
            return Err(crate::error::Error::Config {
                reason: "scenarios must not be empty".into(),
            });
        }
        if self.dictionary_min_count == 0 {
            return Err(crate::error::Error::Config {
                reason: "dictionary_min_count must be at least 1".into(),
            });
        }
        Ok(())
    }

    /// Content hash recorded in every artifact this configuration produces.
    /// Computed over the canonical JSON form, so formatting and key order
    /// of the source file do not matter.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        sha256_hex(&json)[..16].to_string()
    }

    /// The hash with run-variable fields (seed, stage) pinned, for tying
    /// multi-seed artifacts to one base configuration.
    pub fn base_hash(&self) -> String {
        let mut pinned = self.clone();
        pinned.train.seed = 0;
        pinned.train.stage = 1;
        pinned.hash()
    }

    /// Metadata block shared by artifacts of this run.
    pub fn meta_extra(&self) -> BTreeMap<String, String> {
        let mut extra = BTreeMap::new();
        extra.insert("strategy".to_string(), self.train.strategy.to_string());
        extra.insert("protocol_mode".to_string(), self.protocol_mode.to_string());
        extra
    }
}
