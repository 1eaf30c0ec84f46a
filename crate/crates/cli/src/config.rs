//! Experiment configuration: one JSON document, unknown keys rejected.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use brierlab::algorithms::HyperParams;
use brierlab::data::SyntheticConfig;
use brierlab::reward::PenaltyConfig;
use brierlab::trainer::TrainConfig;

use crate::ValidationError;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataPaths {
    pub train: PathBuf,
    pub test: PathBuf,
    #[serde(default)]
    pub oracle: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSection {
    /// Generator settings; its `seed` is taken from the global seed.
    #[serde(default)]
    pub generator: SyntheticConfig,
    /// Trailing share of the stream held out as the test split.
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
}

fn default_test_fraction() -> f64 {
    0.2
}

impl Default for SynthSection {
    fn default() -> Self {
        Self {
            generator: SyntheticConfig::default(),
            test_fraction: default_test_fraction(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationSection {
    pub n_bins: usize,
    pub bootstrap_reps: usize,
}

impl Default for EvaluationSection {
    fn default() -> Self {
        Self {
            n_bins: 10,
            bootstrap_reps: 9_999,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EceSource {
    /// ECE from the leading (chronologically earliest) share of the priced
    /// questions; trades are placed on the rest.
    CalibrationSplit,
    InSample,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TradingSection {
    pub ece_source: EceSource,
    pub calibration_fraction: f64,
    pub bootstrap_reps: usize,
}

impl Default for TradingSection {
    fn default() -> Self {
        Self {
            ece_source: EceSource::CalibrationSplit,
            calibration_fraction: 0.5,
            bootstrap_reps: 9_999,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub seed: u64,
    pub data: DataPaths,
    #[serde(default)]
    pub synthetic: SynthSection,
    #[serde(default)]
    pub train: TrainConfig,
    /// Defaults to the algorithm's paper settings when omitted.
    #[serde(default)]
    pub hyper: Option<HyperParams>,
    #[serde(default)]
    pub penalties: PenaltyConfig,
    #[serde(default = "default_ensemble_size")]
    pub ensemble_size: usize,
    #[serde(default)]
    pub evaluation: EvaluationSection,
    #[serde(default)]
    pub trading: TradingSection,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
}

fn default_ensemble_size() -> usize {
    1
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

/// A parsed config with its relative paths resolved against the config's directory.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: RunConfig,
    /// SHA-256 of the config file as read, before overrides.
    pub source_sha256: String,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| ValidationError(format!("config: {e}")))?;
        Ok(cfg)
    }

    pub fn hyper(&self) -> HyperParams {
        self.hyper
            .unwrap_or_else(|| HyperParams::for_algorithm(self.train.algorithm))
    }

    /// Training seed of ensemble member `k`.
    pub fn member_seed(&self, k: usize) -> u64 {
        self.seed.wrapping_add(k as u64)
    }

    pub fn synthetic_config(&self) -> SyntheticConfig {
        SyntheticConfig {
            seed: self.seed,
            ..self.synthetic.generator.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |m: String| -> Result<()> { Err(ValidationError(m).into()) };
        if self.schema_version != SCHEMA_VERSION {
            return invalid(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        if self.ensemble_size == 0 {
            return invalid("ensemble_size must be >= 1".into());
        }
        if self.train.seed != 0 || self.synthetic.generator.seed != 0 {
            return invalid("set the top-level `seed`; per-section seeds are derived from it".into());
        }
        if !(0.0..=1.0).contains(&self.synthetic.test_fraction) {
            return invalid("synthetic.test_fraction must lie in [0, 1]".into());
        }
        if self.evaluation.n_bins == 0 {
            return invalid("evaluation.n_bins must be >= 1".into());
        }
        let cf = self.trading.calibration_fraction;
        if !(cf > 0.0 && cf < 1.0) {
            return invalid("trading.calibration_fraction must lie in (0, 1)".into());
        }
        self.synthetic
            .generator
            .validate()
            .map_err(|e| ValidationError(format!("synthetic: {e}")))?;
        self.penalties
            .validate()
            .map_err(|e| ValidationError(format!("penalties: {e}")))?;
        self.train
            .validate(&self.hyper())
            .map_err(|e| ValidationError(format!("train: {e}")))?;
        Ok(())
    }

    fn resolve_paths(&mut self, base: &Path) {
        let join = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        join(&mut self.data.train);
        join(&mut self.data.test);
        if let Some(o) = self.data.oracle.as_mut() {
            join(o);
        }
        join(&mut self.out_dir);
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Reads, parses, resolves and validates a config file.
pub fn load(path: &Path) -> Result<LoadedConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let mut config = RunConfig::from_json(&text)?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    config.resolve_paths(&base);
    config.validate()?;
    Ok(LoadedConfig {
        source_sha256: sha256_hex(text.as_bytes()),
        config,
    })
}

/// Hash of the effective configuration after overrides, used by the manifest.
pub fn effective_hash(config: &RunConfig) -> Result<String> {
    let json = serde_json::to_vec(config)?;
    Ok(sha256_hex(&json))
}

pub fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
        }
    }
    Ok(())
}

pub fn require_file(path: &Path, what: &str) -> Result<()> {
    if !path.is_file() {
        bail!(ValidationError(format!("{what} not found: {}", path.display())));
    }
    Ok(())
}
