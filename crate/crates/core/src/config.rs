//! Experiment configuration file (TOML) with every pipeline constant as an explicit default.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::SynthSpec;
use crate::dsp::{MixConfig, StftConfig};
use crate::model::SeparatorConfig;
use crate::scoring::Aggregation;
use crate::training::{TrainConfig, TrainMode};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    /// Existing manifest; when absent the `synth` spec is generated under `<out_dir>/data`.
    pub manifest: Option<PathBuf>,
    pub synth: Option<SynthSpec>,
    /// Machine types to run; empty selects every type in the manifest.
    pub machines: Vec<String>,
    /// Machine types dropped from both target and non-target roles.
    pub exclude: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoringConfig {
    pub ridge_rel: f64,
    pub aggregation: Aggregation,
    pub segment_seconds: f64,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        Self {
            ridge_rel: 1e-6,
            aggregation: Aggregation::Mean,
            segment_seconds: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub max_fpr: f64,
    /// Modes run by `compare` when none are given on the command line.
    pub modes: Vec<TrainMode>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            max_fpr: 0.1,
            modes: TrainMode::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Drives synthesis, initialisation and training; overrides the nested seeds.
    pub seed: u64,
    pub out_dir: PathBuf,
    pub dataset: DatasetConfig,
    pub stft: StftConfig,
    pub mix: MixConfig,
    pub model: SeparatorConfig,
    pub train: TrainConfig,
    pub scoring: ScoringConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            dataset: DatasetConfig {
                synth: Some(SynthSpec::default()),
                ..DatasetConfig::default()
            },
            stft: StftConfig::default(),
            mix: MixConfig::default(),
            model: SeparatorConfig::default(),
            train: TrainConfig::default(),
            scoring: ScoringConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Parse { path: PathBuf, msg: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

impl ExperimentConfig {
    /// CPU-sized preset used by the end-to-end acceptance run.
    pub fn desk() -> Self {
        let mut cfg = Self {
            seed: 7,
            out_dir: PathBuf::from("runs/desk"),
            ..Self::default()
        };
        cfg.stft.hop = 300;
        cfg.model = SeparatorConfig {
            channels: 8,
            num_blocks: 2,
            tap_blocks: Some([1, 2]),
            attention_heads: 1,
            freq_downsample: 4,
            dense_depth: 1,
            ffn_mult: 2,
            conv_kernel: 7,
            ..SeparatorConfig::default()
        };
        cfg.train = TrainConfig {
            epochs: 6,
            batch_size: 8,
            lr: 5e-3,
            step_size: 4,
            crop_seconds: 1.0,
            ..TrainConfig::default()
        };
        cfg
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text).map_err(|msg| ConfigError::Parse {
            path: path.to_path_buf(),
            msg,
        })
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serialises")
    }

    /// Propagates the top-level seed and checks nested invariants.
    pub fn resolve(mut self) -> Result<Self, ConfigError> {
        let invalid = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        if let Some(s) = &mut self.dataset.synth {
            s.seed = self.seed;
            s.validate().map_err(|e| invalid(&e))?;
        }
        if self.dataset.manifest.is_none() && self.dataset.synth.is_none() {
            return Err(ConfigError::Invalid("dataset needs either `manifest` or `synth`".into()));
        }
        self.train.seed = self.seed;
        self.stft.validate().map_err(|e| invalid(&e))?;
        self.mix.validate().map_err(|e| invalid(&e))?;
        self.model.validate().map_err(|e| invalid(&e))?;
        self.train.loss.validate().map_err(|e| invalid(&e))?;
        if !(self.scoring.ridge_rel > 0.0) {
            return Err(ConfigError::Invalid("scoring.ridge_rel must be > 0".into()));
        }
        if !(self.scoring.segment_seconds > 0.0) {
            return Err(ConfigError::Invalid("scoring.segment_seconds must be > 0".into()));
        }
        if !(self.eval.max_fpr > 0.0 && self.eval.max_fpr <= 1.0) {
            return Err(ConfigError::Invalid("eval.max_fpr must lie in (0, 1]".into()));
        }
        Ok(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_carry_the_experiment_constants() {
        let c = ExperimentConfig::default();
        assert_eq!((c.stft.n_fft, c.stft.hop), (400, 100));
        assert_eq!(c.mix.delta_db, -5.0);
        assert_eq!(c.model.channels, 64);
        assert_eq!(c.model.embedding_dim(), 192);
        assert_eq!((c.train.loss.alpha, c.train.loss.beta, c.train.loss.gamma), (0.5, 6.0, 1.0));
        assert_eq!(c.train.crop_seconds, 2.0);
        assert_eq!(c.eval.max_fpr, 0.1);
        assert_eq!(c.scoring.segment_seconds, 2.0);
        assert_eq!(crate::dataset::SAMPLE_RATE, 16_000);
    }

    #[test]
    fn toml_round_trip_and_partial_files() {
        let c = ExperimentConfig::desk();
        assert_eq!(ExperimentConfig::parse(&c.to_toml()).unwrap(), c);
        let partial = ExperimentConfig::parse("seed = 3\n[model]\nchannels = 16\n").unwrap();
        assert_eq!(partial.seed, 3);
        assert_eq!(partial.model.channels, 16);
        assert_eq!(partial.stft, StftConfig::default());
        assert!(ExperimentConfig::parse("[model]\nchanels = 16\n").is_err());
    }

    #[test]
    fn resolve_propagates_seed() {
        let c = ExperimentConfig {
            seed: 42,
            ..ExperimentConfig::desk()
        }
        .resolve()
        .unwrap();
        assert_eq!(c.train.seed, 42);
        assert_eq!(c.dataset.synth.unwrap().seed, 42);
        let bad = ExperimentConfig {
            dataset: DatasetConfig::default(),
            ..ExperimentConfig::default()
        };
        assert!(bad.resolve().is_err());
    }
}
