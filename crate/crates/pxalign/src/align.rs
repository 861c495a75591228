//! Alignment of predicted behaviors into bias-independent scores.
//!
//! Two alignment methods are offered. Conditional quantile mapping sends
//! a prediction x with bucket key y to z = F(x | Y = y); when the fitted
//! conditional law matches the data-generating one, z is uniform on
//! [0, 1] within every bucket and therefore carries no information about
//! y. Mean alignment is the cheaper first-order version z = x − E[X | Y = y],
//! which removes bucket-level location shifts but not shape differences.
//!
//! Quantile-mapped scores may then be reshaped to any target law G via
//! z' = F⁻¹_G(z), which preserves ranks (and independence from y) while
//! fixing the marginal shape. Finally, per-signal scores are fused as a
//! weighted sum Σ wᵢ·zᵢ.
//!
//! Quantile mapping of a score that sits on an atom of the conditional
//! law (a near-discrete signal) cannot be both deterministic and
//! uniform. `TieMode` makes the choice explicit: `Deterministic` places
//! atoms at the midpoint of their probability span (reproducible
//! serving, z no longer exactly uniform), `Randomized` draws uniformly
//! within the span (randomized probability integral transform, exactly
//! uniform, seeded for reproducibility).

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::bias::BiasKey;
use crate::conddist::ConditionalModel;
use crate::error::{Error, Result};
use crate::numeric::{mix_seed, normal_cdf, normal_quantile, open01};
use crate::summary::hazen_quantile;

/// Marginal law given to the reshaping step z' = F⁻¹_G(z).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum TargetDistribution {
    Uniform01,
    Gaussian { location: f64, scale: f64 },
    /// Law defined by a non-decreasing quantile grid at the levels
    /// (j − 0.5) / len, interpolated the same way fitted empirical
    /// summaries are.
    Empirical { grid: Vec<f64> },
}

impl TargetDistribution {
    pub fn validate(&self) -> Result<()> {
        match self {
            Self::Uniform01 => Ok(()),
            Self::Gaussian { location, scale } => {
                if !location.is_finite() || !scale.is_finite() || *scale <= 0.0 {
                    return Err(Error::InvalidSpec(format!(
                        "gaussian target needs finite location and positive scale, \
                         got location {location}, scale {scale}"
                    )));
                }
                Ok(())
            }
            Self::Empirical { grid } => {
                if grid.len() < 2 {
                    return Err(Error::InvalidSpec(format!(
                        "empirical target grid needs at least 2 points, got {}",
                        grid.len()
                    )));
                }
                for pair in grid.windows(2) {
                    if !(pair[1] >= pair[0]) {
                        return Err(Error::InvalidSpec(format!(
                            "empirical target grid must be non-decreasing and finite, \
                             got adjacent points {} and {}",
                            pair[0], pair[1]
                        )));
                    }
                }
                if !grid[0].is_finite() || !grid[grid.len() - 1].is_finite() {
                    return Err(Error::InvalidSpec(
                        "empirical target grid must be finite".into(),
                    ));
                }
                Ok(())
            }
        }
    }

    /// F⁻¹_G(z) for z in [0, 1]. Unbounded targets clamp z away from the
    /// exact endpoints so the result stays finite; the clamp moves z by
    /// less than one part in 2⁵², far inside any estimator's resolution.
    pub fn inverse(&self, z: f64) -> f64 {
        match self {
            Self::Uniform01 => z,
            Self::Gaussian { location, scale } => {
                let z = z.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0);
                location + scale * normal_quantile(z)
            }
            Self::Empirical { grid } => hazen_quantile(grid, z),
        }
    }

    /// F_G(v). For the empirical target this is the step CDF of the grid
    /// points with ties split at the midpoint, so it depends on grid
    /// values only through comparison counts.
    pub fn cdf(&self, v: f64) -> f64 {
        match self {
            Self::Uniform01 => v.clamp(0.0, 1.0),
            Self::Gaussian { location, scale } => normal_cdf((v - location) / scale),
            Self::Empirical { grid } => {
                let below = grid.partition_point(|g| *g < v);
                let at_or_below = grid.partition_point(|g| *g <= v);
                (below + at_or_below) as f64 / (2 * grid.len()) as f64
            }
        }
    }
}

/// Atom policy for quantile mapping; see the module documentation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum TieMode {
    Deterministic,
    Randomized { seed: u64 },
}

/// Per-signal alignment method.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMethod {
    Quantile,
    Mean,
}

/// How one signal is aligned in `score_pipeline`. A reshaping target is
/// only meaningful after quantile mapping; configuring one together with
/// mean alignment is rejected rather than ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalAlignment {
    pub method: ScoreMethod,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<TargetDistribution>,
}

impl SignalAlignment {
    pub fn validate(&self) -> Result<()> {
        if self.method == ScoreMethod::Mean {
            if let Some(target) = &self.target {
                return Err(Error::InvalidSpec(format!(
                    "mean alignment does not produce uniform scores, so a \
                     reshaping target ({target:?}) cannot be applied to it"
                )));
            }
        }
        if let Some(target) = &self.target {
            target.validate()?;
        }
        Ok(())
    }
}

/// Importance weights for fusing per-signal scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BTreeMap<String, f64>", into = "BTreeMap<String, f64>")]
pub struct FusionWeights {
    weights: BTreeMap<String, f64>,
}

impl FusionWeights {
    pub fn new(weights: BTreeMap<String, f64>) -> Result<Self> {
        if let Some((name, w)) = weights.iter().find(|(_, w)| !w.is_finite()) {
            return Err(Error::InvalidSpec(format!(
                "fusion weight for signal '{name}' is {w}"
            )));
        }
        if !weights.values().any(|w| *w != 0.0) {
            return Err(Error::InvalidSpec(
                "fusion needs at least one nonzero weight".into(),
            ));
        }
        Ok(Self { weights })
    }

    pub fn weights(&self) -> &BTreeMap<String, f64> {
        &self.weights
    }
}

impl TryFrom<BTreeMap<String, f64>> for FusionWeights {
    type Error = Error;

    fn try_from(weights: BTreeMap<String, f64>) -> Result<Self> {
        Self::new(weights)
    }
}

impl From<FusionWeights> for BTreeMap<String, f64> {
    fn from(value: FusionWeights) -> Self {
        value.weights
    }
}

/// One signal's aligned score together with the method that produced it,
/// so downstream reporting can flag mixed-method fusions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalScore {
    pub method: ScoreMethod,
    pub z: f64,
}

/// Result of the full per-record alignment: per-signal scores and their
/// weighted fusion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignedScore {
    pub per_signal: BTreeMap<String, SignalScore>,
    pub z_final: f64,
}

impl AlignedScore {
    /// True when the fused signals do not all share one method, in which
    /// case z_final mixes bounded [0, 1] scores with unbounded centered
    /// ones.
    pub fn mixes_methods(&self) -> bool {
        let mut methods = self.per_signal.values().map(|s| s.method);
        match methods.next() {
            Some(first) => methods.any(|m| m != first),
            None => false,
        }
    }
}

/// z = F(x | Y = key) under the model's conditional law. `TieMode`
/// resolves atoms; at continuity points both modes return the same
/// value. The result is always in [0, 1].
pub fn quantile_map(
    model: &ConditionalModel,
    key: &BiasKey,
    x: f64,
    tie_mode: TieMode,
) -> Result<f64> {
    let (lo, hi) = model.cdf_interval(key, x)?;
    Ok(match tie_mode {
        TieMode::Deterministic => 0.5 * (lo + hi),
        TieMode::Randomized { seed } => {
            if hi > lo {
                let mut rng = ChaCha12Rng::seed_from_u64(seed);
                lo + open01(&mut rng) * (hi - lo)
            } else {
                lo
            }
        }
    })
}

/// z = x − E[X | Y = key], computed in the model's transform space. The
/// conditional mean honors the model's shrinkage, so with nonzero
/// shrinkage small buckets are pulled toward the pooled mean.
pub fn mean_align(model: &ConditionalModel, key: &BiasKey, x: f64) -> Result<f64> {
    let t = model.transform().apply(x)?;
    Ok(t - model.cond_mean(key)?)
}

/// z' = F⁻¹_G(z): reshapes a uniform score to the target marginal.
/// Monotone non-decreasing in z, so ranks survive; strictly monotone for
/// continuous targets.
pub fn to_target(z: f64, target: &TargetDistribution) -> Result<f64> {
    target.validate()?;
    if !(0.0..=1.0).contains(&z) {
        return Err(Error::InvalidValue(format!(
            "score {z} outside [0, 1] cannot be reshaped"
        )));
    }
    Ok(target.inverse(z))
}

/// z_final = Σ wᵢ·zᵢ over the weighted signals, accumulated in signal
/// name order so the result is independent of how the map was built. A
/// missing signal is an error only when its weight is nonzero; signals
/// without a weight are ignored.
pub fn fuse(per_signal: &BTreeMap<String, f64>, weights: &FusionWeights) -> Result<f64> {
    let mut acc = 0.0;
    for (name, &w) in weights.weights() {
        let z = match per_signal.get(name) {
            Some(&z) => z,
            None if w == 0.0 => continue,
            None => {
                return Err(Error::Incompatible(format!(
                    "signal '{name}' has weight {w} but no aligned score"
                )));
            }
        };
        if !z.is_finite() {
            return Err(Error::InvalidValue(format!(
                "aligned score for signal '{name}' is {z}"
            )));
        }
        acc += w * z;
    }
    Ok(acc)
}

/// Aligns every configured signal and fuses the results. Each signal is
/// mapped by its configured method (quantile mapping plus optional
/// target reshaping, or mean alignment). Under randomized tie mode each
/// signal draws from its own stream derived from the caller's seed, so
/// the result is reproducible and signals do not share draws.
pub fn score_pipeline(
    predictions: &BTreeMap<String, f64>,
    keys: &BTreeMap<String, BiasKey>,
    models: &BTreeMap<String, ConditionalModel>,
    alignments: &BTreeMap<String, SignalAlignment>,
    weights: &FusionWeights,
    tie_mode: TieMode,
) -> Result<AlignedScore> {
    let mut per_signal = BTreeMap::new();
    for (index, (name, alignment)) in alignments.iter().enumerate() {
        alignment.validate()?;
        let x = *predictions.get(name).ok_or_else(|| {
            Error::Incompatible(format!("no prediction for configured signal '{name}'"))
        })?;
        let key = keys.get(name).ok_or_else(|| {
            Error::Incompatible(format!("no bias key for configured signal '{name}'"))
        })?;
        let model = models.get(name).ok_or_else(|| {
            Error::Incompatible(format!("no fitted model for configured signal '{name}'"))
        })?;
        let z = match alignment.method {
            ScoreMethod::Quantile => {
                let signal_mode = match tie_mode {
                    TieMode::Deterministic => TieMode::Deterministic,
                    TieMode::Randomized { seed } => TieMode::Randomized {
                        seed: mix_seed(seed, index as u64),
                    },
                };
                let z = quantile_map(model, key, x, signal_mode)?;
                match &alignment.target {
                    Some(target) => to_target(z, target)?,
                    None => z,
                }
            }
            ScoreMethod::Mean => mean_align(model, key, x)?,
        };
        per_signal.insert(
            name.clone(),
            SignalScore {
                method: alignment.method,
                z,
            },
        );
    }
    let scores: BTreeMap<String, f64> = per_signal
        .iter()
        .map(|(name, s)| (name.clone(), s.z))
        .collect();
    let z_final = fuse(&scores, weights)?;
    Ok(AlignedScore {
        per_signal,
        z_final,
    })
}
