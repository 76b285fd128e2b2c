//! Run configuration: one TOML file with `data`, `augment`, `encoder`,
//! `loss`, `train` and `eval` tables.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::augment::AugmentConfig;
use crate::dataio::SyntheticSpec;
use crate::encoder::EncoderConfig;
use crate::eval::EvalConfig;
use crate::losses::LossConfig;
use crate::trainer::TrainConfig;

pub const SCHEMA_VERSION: u32 = 1;
pub const SEED_ENV: &str = "VIDSSL_SEED";
pub const DEVICE_ENV: &str = "VIDSSL_DEVICE";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("invalid config {path}: {message}")]
    Parse { path: String, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub synthetic: SyntheticSpec,
    pub seed: u64,
    /// Videos per class held out for evaluation.
    pub test_per_class: usize,
    /// Clip-folder dataset to use instead of generating one.
    pub folder: Option<PathBuf>,
    /// Frame size `(H, W)` for clip-folder ingestion.
    pub resize: (usize, usize),
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            synthetic: SyntheticSpec { videos_per_class: 70, ..Default::default() },
            seed: 0,
            test_per_class: 20,
            folder: None,
            resize: (64, 64),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub augment: AugmentConfig,
    #[serde(default)]
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl RunConfig {
    /// Desk-scale defaults: 16x64x64 clips spanning 16 of 32 frames.
    pub fn desk() -> Self {
        RunConfig {
            schema_version: SCHEMA_VERSION,
            data: DataConfig::default(),
            augment: AugmentConfig::default(),
            encoder: EncoderConfig::desk(),
            loss: LossConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }

    /// Reduced profile: 8x32x32 clips spanning 8 of 32 frames, small encoder.
    pub fn fast() -> Self {
        let mut c = Self::desk();
        c.encoder = EncoderConfig::fast();
        c.augment.clip_span_frames = 8;
        c.augment.local_frames = 8;
        c.augment.global_frames = 8;
        c
    }

    pub fn from_toml_str(text: &str, origin: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| ConfigError::Parse { path: origin.to_string(), message: e.to_string() })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file and applies environment overrides.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        let mut cfg = Self::from_toml_str(&text, &path.display().to_string())?;
        cfg.apply_env()?;
        Ok(cfg)
    }

    pub fn apply_env(&mut self) -> Result<(), ConfigError> {
        if let Ok(s) = std::env::var(SEED_ENV) {
            self.train.seed = s.trim().parse().map_err(|_| ConfigError::Invalid(format!("{SEED_ENV}={s:?} is not an integer")))?;
        }
        if let Ok(d) = std::env::var(DEVICE_ENV) {
            self.train.device = d;
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(ConfigError::Invalid(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        let inv = |e: String| ConfigError::Invalid(e);
        self.augment.validate().map_err(|e| inv(e.to_string()))?;
        self.encoder.validate().map_err(|e| inv(e.to_string()))?;
        self.loss.validate().map_err(|e| inv(e.to_string()))?;
        self.train.validate().map_err(|e| inv(e.to_string()))?;
        if self.data.folder.is_none() {
            self.data.synthetic.validate().map_err(|e| inv(e.to_string()))?;
            if self.data.test_per_class >= self.data.synthetic.videos_per_class {
                return Err(inv("test_per_class must leave training videos in every class".into()));
            }
        }
        let t = self.encoder.input[0];
        if self.augment.global_frames != t || self.augment.local_frames != t {
            return Err(inv(format!("augment frame counts must equal encoder input length {t}")));
        }
        if self.eval.ks.is_empty() || self.eval.clips_per_video == 0 {
            return Err(inv("eval.ks and eval.clips_per_video must be non-empty".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form; independent of key order in the file.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serialises");
        hex::encode(Sha256::digest(json))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serialises to TOML")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_hash_stability() {
        let c = RunConfig::fast();
        let text = c.to_toml();
        let back = RunConfig::from_toml_str(&text, "mem").unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        let a = "schema_version = 1\n[loss]\nw_mi = 0.5\ntemperature = 0.2\n[train]\nseed = 3\n";
        let b = "schema_version = 1\n[train]\nseed = 3\n[loss]\ntemperature = 0.2\nw_mi = 0.5\n";
        assert_eq!(RunConfig::from_toml_str(a, "a").unwrap().hash(), RunConfig::from_toml_str(b, "b").unwrap().hash());
        assert_ne!(RunConfig::desk().hash(), RunConfig::fast().hash());
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::from_toml_str("schema_version = 1\n[loss]\nw_bogus = 1.0\n", "x.toml").unwrap_err();
        assert!(err.to_string().contains("w_bogus"), "{err}");
        let err = RunConfig::from_toml_str("schema_version = 9\n", "x.toml").unwrap_err();
        assert!(err.to_string().contains("schema_version"));
    }
}
