//! Versioned on-disk model artifacts with content fingerprints.
//!
//! An artifact bundles the two fitted stages for one signal: the
//! optional behavior predictor and the conditional distribution model.
//! It carries an explicit format version and the fingerprint of the bias
//! specification it was fitted under, so a scoring run can reject a
//! model from a different bucketing scheme before touching any data.
//!
//! Fingerprints are SHA-256 digests of the value's canonical JSON
//! encoding. Map keys are ordered and floats round-trip bit-exactly, so
//! equal values always produce equal fingerprints.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::behavior::PredictorModel;
use crate::bias::BiasSpec;
use crate::conddist::ConditionalModel;
use crate::error::{Error, Result};

pub const MODEL_FORMAT_VERSION: u32 = 1;

/// Hex SHA-256 of raw bytes.
pub fn fingerprint_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hex SHA-256 of a value's canonical JSON encoding.
pub fn fingerprint_value<T: Serialize>(value: &T) -> Result<String> {
    Ok(fingerprint_bytes(&serde_json::to_vec(value)?))
}

/// Everything needed to score one signal, ready to persist.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelArtifact {
    pub format_version: u32,
    pub signal: String,
    /// Fingerprint of the `BiasSpec` the models were fitted under.
    pub spec_fingerprint: String,
    /// Fitted behavior predictor; absent when predictions come from an
    /// oracle column instead of a trained model.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predictor: Option<PredictorModel>,
    pub model: ConditionalModel,
}

impl ModelArtifact {
    pub fn new(model: ConditionalModel, predictor: Option<PredictorModel>) -> Result<Self> {
        if let Some(p) = &predictor {
            if p.signal() != model.signal() {
                return Err(Error::Artifact(format!(
                    "predictor is for signal '{}' but the conditional model is for '{}'",
                    p.signal(),
                    model.signal()
                )));
            }
        }
        Ok(Self {
            format_version: MODEL_FORMAT_VERSION,
            signal: model.signal().to_string(),
            spec_fingerprint: fingerprint_value(model.spec())?,
            predictor,
            model,
        })
    }

    /// Fails when the artifact was fitted under a different bias
    /// specification than `spec`.
    pub fn verify_spec(&self, spec: &BiasSpec) -> Result<()> {
        let expected = fingerprint_value(spec)?;
        if self.spec_fingerprint != expected {
            return Err(Error::Artifact(format!(
                "model artifact for signal '{}' was fitted under bias specification \
                 {} but the current configuration has {}",
                self.signal, self.spec_fingerprint, expected
            )));
        }
        Ok(())
    }

    /// Content fingerprint of the whole artifact, as embedded in reports.
    pub fn fingerprint(&self) -> Result<String> {
        fingerprint_value(self)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        Ok(text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let artifact: Self = serde_json::from_str(text)?;
        if artifact.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::Artifact(format!(
                "unsupported model artifact format version {} (this build reads {})",
                artifact.format_version, MODEL_FORMAT_VERSION
            )));
        }
        let expected = fingerprint_value(artifact.model.spec())?;
        if artifact.spec_fingerprint != expected {
            return Err(Error::Artifact(format!(
                "model artifact for signal '{}' carries spec fingerprint {} but its \
                 embedded specification hashes to {}",
                artifact.signal, artifact.spec_fingerprint, expected
            )));
        }
        if artifact.signal != artifact.model.signal() {
            return Err(Error::Artifact(format!(
                "artifact is labeled '{}' but contains a model for '{}'",
                artifact.signal,
                artifact.model.signal()
            )));
        }
        if let Some(p) = &artifact.predictor {
            if p.signal() != artifact.signal {
                return Err(Error::Artifact(format!(
                    "artifact is labeled '{}' but contains a predictor for '{}'",
                    artifact.signal,
                    p.signal()
                )));
            }
        }
        Ok(artifact)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| {
            Error::Artifact(format!("cannot read model artifact {}: {e}", path.display()))
        })?;
        Self::from_json(&text)
    }
}
