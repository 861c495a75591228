//! Experiment configuration: one TOML document drives every stage.
//!
//! Sections: `[[bias]]` dimensions with sampling probabilities,
//! `[simulator]` with its `[[simulator.signals]]` laws, `[predictor.<signal>]`
//! (oracle pass-through or trained model), `[conddist]` estimator
//! settings, `[alignment]` with per-signal `[alignment.signals.<signal>]`
//! methods, `[fusion]` weights, `[evaluation]` thresholds, `[output]`
//! paths, and a top-level `master_seed`. Every stage seed is derived
//! from the master seed, so a config file plus one integer fully
//! determines each artifact.
//!
//! The parsed form and the textual form are interchangeable: parsing the
//! serialization of a config yields an equal value.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::align::{FusionWeights, SignalAlignment};
use crate::behavior::{LinkKind, TrainConfig};
use crate::bias::{BiasDimension, BiasSpec, DimensionKind};
use crate::conddist::{FitOptions, TransformSpace};
use crate::error::{Error, Result};
use crate::quantreg::QuantileRegConfig;
use crate::simulate::{SignalSim, SimConfig};

/// One bias dimension together with its simulator bucket probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasDimConfig {
    pub name: String,
    #[serde(flatten)]
    pub kind: DimensionKind,
    pub probabilities: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulatorConfig {
    pub n_records: u64,
    pub signals: Vec<SignalSim>,
}

/// Where one signal's predictions come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum PredictorConfig {
    /// Use the table's `x:` column as-is (simulated latents or an
    /// external model's output); the training step is skipped.
    Oracle,
    /// Train a linear predictor on the encoded bias readings. Identity
    /// link fits a regressor, logistic link a classifier on {0, 1}
    /// observations.
    Trained {
        #[serde(default)]
        train: TrainConfig,
        #[serde(default = "default_link")]
        link: LinkKind,
    },
}

fn default_link() -> LinkKind {
    LinkKind::Identity
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfigTieMode {
    #[default]
    Deterministic,
    /// Randomized probability integral transform; per-record seeds are
    /// derived from the master seed.
    Randomized,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfigEstimator {
    Empirical,
    Gaussian,
    Lognormal,
    QuantileRegression,
}

/// Settings read only when `estimator = "quantile_regression"`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuantileRegSection {
    /// Number of regression quantile levels; the levels themselves are
    /// (j − 0.5) / tau_levels for j = 1..=tau_levels.
    pub tau_levels: usize,
    pub train: QuantileRegConfig,
}

impl Default for QuantileRegSection {
    fn default() -> Self {
        Self {
            tau_levels: 33,
            train: QuantileRegConfig::default(),
        }
    }
}

impl QuantileRegSection {
    pub fn levels(&self) -> Vec<f64> {
        (1..=self.tau_levels)
            .map(|j| (j as f64 - 0.5) / self.tau_levels as f64)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConddistConfig {
    pub estimator: ConfigEstimator,
    pub grid_size: usize,
    pub min_bucket_count: u64,
    pub shrinkage_strength: f64,
    pub transform_space: TransformSpace,
    pub quantile_regression: QuantileRegSection,
}

impl Default for ConddistConfig {
    fn default() -> Self {
        Self {
            estimator: ConfigEstimator::Empirical,
            grid_size: 1024,
            min_bucket_count: 32,
            shrinkage_strength: 0.0,
            transform_space: TransformSpace::Identity,
            quantile_regression: QuantileRegSection::default(),
        }
    }
}

impl ConddistConfig {
    pub fn fit_options(&self) -> FitOptions {
        FitOptions {
            grid_size: self.grid_size,
            min_bucket_count: self.min_bucket_count,
            shrinkage_strength: self.shrinkage_strength,
            transform: self.transform_space,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentConfig {
    #[serde(default)]
    pub tie_mode: ConfigTieMode,
    pub signals: BTreeMap<String, SignalAlignment>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    pub mi_bins: usize,
    pub ks_bucket_threshold: f64,
    pub ks_global_threshold: f64,
    /// Buckets with fewer aligned samples than this are skipped in the
    /// per-bucket KS table.
    pub min_bucket_evaluation_count: u64,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            mi_bins: 10,
            ks_bucket_threshold: 0.02,
            ks_global_threshold: 0.005,
            min_bucket_evaluation_count: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub directory: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            directory: PathBuf::from("out"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub master_seed: u64,
    pub bias: Vec<BiasDimConfig>,
    pub simulator: SimulatorConfig,
    pub predictor: BTreeMap<String, PredictorConfig>,
    pub conddist: ConddistConfig,
    pub alignment: AlignmentConfig,
    pub fusion: FusionWeights,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read config file {}: {e}", path.display()))
        })?;
        Self::from_toml_str(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_toml_string()?)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let spec = self.bias_spec()?;
        for (dim, config) in spec.dimensions().iter().zip(&self.bias) {
            if config.probabilities.len() != dim.bucket_count() {
                return Err(Error::Config(format!(
                    "bias dimension '{}' has {} buckets but {} probabilities",
                    dim.name,
                    dim.bucket_count(),
                    config.probabilities.len()
                )));
            }
        }
        let signals = self.signal_names();
        if signals.is_empty() {
            return Err(Error::Config("no signals defined under [simulator]".into()));
        }
        let mut sorted = signals.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != signals.len() {
            return Err(Error::Config(format!(
                "duplicate signal definition under [simulator]: {signals:?}"
            )));
        }
        // Per-signal sections must cover the defined signals exactly.
        for (section, keys) in [
            ("predictor", self.predictor.keys().collect::<Vec<_>>()),
            ("alignment.signals", self.alignment.signals.keys().collect()),
        ] {
            for key in &keys {
                if !signals.contains(key) {
                    return Err(Error::Config(format!(
                        "[{section}] refers to undefined signal '{key}'"
                    )));
                }
            }
            for signal in &signals {
                if !keys.iter().any(|k| *k == signal) {
                    return Err(Error::Config(format!(
                        "[{section}] has no entry for signal '{signal}'"
                    )));
                }
            }
        }
        for name in self.fusion.weights().keys() {
            if !signals.contains(name) {
                return Err(Error::Config(format!(
                    "[fusion] refers to undefined signal '{name}'"
                )));
            }
        }
        for (name, alignment) in &self.alignment.signals {
            alignment
                .validate()
                .map_err(|e| Error::Config(format!("alignment for signal '{name}': {e}")))?;
        }
        for (name, predictor) in &self.predictor {
            if let PredictorConfig::Trained { train, .. } = predictor {
                train
                    .validate()
                    .map_err(|e| Error::Config(format!("[predictor.{name}]: {e}")))?;
            }
        }
        self.conddist
            .fit_options()
            .validate()
            .map_err(|e| Error::Config(format!("[conddist]: {e}")))?;
        if self.conddist.estimator == ConfigEstimator::QuantileRegression {
            let section = &self.conddist.quantile_regression;
            if section.tau_levels < 2 {
                return Err(Error::Config(format!(
                    "[conddist.quantile_regression] needs at least 2 tau levels, \
                     got {}",
                    section.tau_levels
                )));
            }
            section
                .train
                .validate()
                .map_err(|e| Error::Config(format!("[conddist.quantile_regression]: {e}")))?;
        }
        let eval = &self.evaluation;
        if eval.mi_bins < 2 {
            return Err(Error::Config(format!(
                "[evaluation] mi_bins must be at least 2, got {}",
                eval.mi_bins
            )));
        }
        for (name, v) in [
            ("ks_bucket_threshold", eval.ks_bucket_threshold),
            ("ks_global_threshold", eval.ks_global_threshold),
        ] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::Config(format!(
                    "[evaluation] {name} must be in (0, 1], got {v}"
                )));
            }
        }
        // The simulator assembly re-checks probabilities and signal laws.
        self.sim_config(self.master_seed)?;
        Ok(())
    }

    /// Signal names in definition order.
    pub fn signal_names(&self) -> Vec<String> {
        self.simulator
            .signals
            .iter()
            .map(|s| s.name.clone())
            .collect()
    }

    pub fn bias_spec(&self) -> Result<BiasSpec> {
        BiasSpec::new(
            self.bias
                .iter()
                .map(|d| BiasDimension {
                    name: d.name.clone(),
                    kind: d.kind.clone(),
                })
                .collect(),
        )
    }

    /// Assembles the simulator input for a given effective master seed.
    pub fn sim_config(&self, seed: u64) -> Result<SimConfig> {
        let config = SimConfig {
            n_records: self.simulator.n_records,
            seed,
            spec: self.bias_spec()?,
            bucket_probabilities: self.bias.iter().map(|d| d.probabilities.clone()).collect(),
            signals: self.simulator.signals.clone(),
        };
        config.validate()?;
        Ok(config)
    }

    /// Canonical content fingerprint used for report lineage.
    pub fn fingerprint(&self) -> Result<String> {
        crate::artifact::fingerprint_value(self)
    }
}
