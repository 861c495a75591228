//! Linear quantile regression over encoded bias features.
//!
//! An alternative to per-bucket binning: one linear model per quantile
//! level τ, fitted by minimizing the pinball loss
//!
//! ```text
//! L_τ(r) = r · (τ − 1[r < 0]),    r = x − prediction,
//! ```
//!
//! with seeded minibatch subgradient descent. Because the loss is shared
//! across buckets through the feature encoding, sparse buckets borrow
//! strength from the rest of the bias space. Predicted quantile curves can
//! cross where the data are thin, so predictions at a query point are
//! sorted ascending before use.
//!
//! [`fit_quantile_model`] turns a fitted regressor into an ordinary
//! [`ConditionalModel`]: each observed bucket's predicted quantile curve is
//! resampled onto the equi-spaced grid, while counts, sums, and extremes
//! come from the bucket's real sample.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::bias::{BiasFeatureEncoder, BiasKey, BiasSpec};
use crate::conddist::{ConditionalModel, EstimatorKind, FitOptions};
use crate::error::{Error, Result};
use crate::exact::ExactSum;
use crate::numeric::{mean_and_std, mix_seed};
use crate::summary::{hazen_quantile, DistributionSummary, EmpiricalSummary};

/// Minibatch subgradient descent settings for pinball-loss fitting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuantileRegConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Initial step size; epoch e uses learning_rate / (1 + decay · e).
    pub learning_rate: f64,
    pub learning_rate_decay: f64,
    /// Fraction of trailing epochs whose iterates are averaged into the
    /// returned coefficients.
    pub tail_fraction: f64,
    /// Relative increase of the epoch loss over the best seen so far that
    /// is still accepted as minibatch noise.
    pub loss_tolerance: f64,
    pub seed: u64,
}

impl Default for QuantileRegConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 64,
            learning_rate: 0.4,
            learning_rate_decay: 0.15,
            tail_fraction: 0.5,
            loss_tolerance: 0.05,
            seed: 0,
        }
    }
}

impl QuantileRegConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidSpec("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidSpec("batch size must be at least 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::InvalidSpec(format!(
                "learning rate must be positive and finite, got {}",
                self.learning_rate
            )));
        }
        if !(self.learning_rate_decay.is_finite() && self.learning_rate_decay >= 0.0) {
            return Err(Error::InvalidSpec(format!(
                "learning rate decay must be non-negative, got {}",
                self.learning_rate_decay
            )));
        }
        if !(self.tail_fraction > 0.0 && self.tail_fraction <= 1.0) {
            return Err(Error::InvalidSpec(format!(
                "tail fraction must be in (0, 1], got {}",
                self.tail_fraction
            )));
        }
        if !(self.loss_tolerance.is_finite() && self.loss_tolerance >= 0.0) {
            return Err(Error::InvalidSpec(format!(
                "loss tolerance must be non-negative, got {}",
                self.loss_tolerance
            )));
        }
        Ok(())
    }
}

/// Per-level linear quantile models over the feature encoding of a
/// [`BiasSpec`]: one-hot per categorical index, bucket midpoint per
/// continuous dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "QuantileRegRepr", into = "QuantileRegRepr")]
pub struct QuantileRegModel {
    spec: BiasSpec,
    tau_levels: Vec<f64>,
    /// One row per level: intercept followed by one weight per feature.
    coefficients: Vec<Vec<f64>>,
}

impl QuantileRegModel {
    /// Fits one linear model per level of `tau_levels` by seeded minibatch
    /// subgradient descent on the pinball loss. Features are standardized
    /// internally; stored coefficients are in raw feature units. Fails
    /// with [`Error::Diverged`] if any epoch's full-pass loss exceeds the
    /// best seen so far beyond `config.loss_tolerance`.
    pub fn fit(
        records: &[(f64, BiasKey)],
        spec: BiasSpec,
        tau_levels: &[f64],
        config: &QuantileRegConfig,
    ) -> Result<Self> {
        config.validate()?;
        validate_tau_levels(tau_levels)?;
        if records.is_empty() {
            return Err(Error::EmptyInput(
                "quantile regression over an empty sample".into(),
            ));
        }
        let encoder = BiasFeatureEncoder::new(spec);
        let d = encoder.feature_len();
        let mut xs = Vec::with_capacity(records.len());
        let mut features = Vec::with_capacity(records.len());
        for (x, key) in records {
            if !x.is_finite() {
                return Err(Error::InvalidValue(format!(
                    "non-finite response value {x}"
                )));
            }
            xs.push(*x);
            features.push(encoder.encode(key)?);
        }
        // Standardize columns so one step size suits every feature.
        // Constant columns map to zero and keep a zero weight.
        let mut centers = vec![0.0; d];
        let mut scales = vec![0.0; d];
        for j in 0..d {
            let column: Vec<f64> = features.iter().map(|f| f[j]).collect();
            let (mean, std) = mean_and_std(&column);
            centers[j] = mean;
            scales[j] = std;
        }
        for row in &mut features {
            for j in 0..d {
                row[j] = if scales[j] > 0.0 {
                    (row[j] - centers[j]) / scales[j]
                } else {
                    0.0
                };
            }
        }
        let mut sorted_xs = xs.clone();
        sorted_xs.sort_by(f64::total_cmp);

        let mut coefficients = Vec::with_capacity(tau_levels.len());
        for (level, &tau) in tau_levels.iter().enumerate() {
            let init = hazen_quantile(&sorted_xs, tau);
            let seed = mix_seed(config.seed, level as u64);
            let (b_std, w_std) = fit_level(&xs, &features, tau, init, config, seed)?;
            // Undo standardization: pred = b + Σ wʲ·(fʲ − μʲ)/σʲ.
            let mut row = Vec::with_capacity(d + 1);
            let mut intercept = b_std;
            let mut weights = Vec::with_capacity(d);
            for j in 0..d {
                let w = if scales[j] > 0.0 { w_std[j] / scales[j] } else { 0.0 };
                intercept -= w * centers[j];
                weights.push(w);
            }
            row.push(intercept);
            row.extend(weights);
            coefficients.push(row);
        }
        Ok(Self {
            spec: encoder.into_spec(),
            tau_levels: tau_levels.to_vec(),
            coefficients,
        })
    }

    pub fn spec(&self) -> &BiasSpec {
        &self.spec
    }

    pub fn tau_levels(&self) -> &[f64] {
        &self.tau_levels
    }

    /// Rows of `[intercept, weight per feature]`, one per tau level, in raw
    /// feature units.
    pub fn coefficients(&self) -> &[Vec<f64>] {
        &self.coefficients
    }

    /// Predicted quantiles at every fitted level for the bucket `key`,
    /// sorted ascending so the levels never cross.
    pub fn predict_quantiles(&self, key: &BiasKey) -> Result<Vec<f64>> {
        let encoder = BiasFeatureEncoder::new(self.spec.clone());
        let f = encoder.encode(key)?;
        let mut preds: Vec<f64> = self
            .coefficients
            .iter()
            .map(|row| row[0] + row[1..].iter().zip(&f).map(|(w, x)| w * x).sum::<f64>())
            .collect();
        preds.sort_by(f64::total_cmp);
        Ok(preds)
    }
}

/// Fits a quantile regressor and materializes it as a [`ConditionalModel`]
/// with empirical-grid buckets: each observed bucket's grid is the
/// predicted quantile curve resampled at the grid levels, while count,
/// sum, and extremes come from the bucket's own records. The fallback is a
/// plain empirical fit of the pooled sample, so sparse-bucket shrinkage
/// and unseen-key handling work exactly as for the binned estimator.
pub fn fit_quantile_model(
    records: Vec<(f64, BiasKey)>,
    spec: BiasSpec,
    signal: &str,
    options: FitOptions,
    tau_levels: &[f64],
    train: &QuantileRegConfig,
) -> Result<ConditionalModel> {
    options.validate()?;
    if records.is_empty() {
        return Err(Error::EmptyInput(format!(
            "no records to fit for signal {signal:?}"
        )));
    }
    let mut transformed = Vec::with_capacity(records.len());
    for (x, key) in records {
        transformed.push((options.transform.apply(x)?, key));
    }
    let model = QuantileRegModel::fit(&transformed, spec, tau_levels, train)?;

    let mut grouped: BTreeMap<BiasKey, Vec<f64>> = BTreeMap::new();
    let mut pooled = Vec::with_capacity(transformed.len());
    for (t, key) in transformed {
        pooled.push(t);
        grouped.entry(key).or_default().push(t);
    }
    let fallback = EmpiricalSummary::fit(&pooled, options.grid_size)?;

    let mut buckets = BTreeMap::new();
    for (key, values) in grouped {
        let preds = model.predict_quantiles(&key)?;
        let grid = resample_grid(&model.tau_levels, &preds, options.grid_size);
        let exact_sum = ExactSum::from_values(&values);
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let summary =
            EmpiricalSummary::from_grid(values.len() as u64, exact_sum, min, max, grid)?;
        buckets.insert(key, DistributionSummary::Empirical(summary));
    }
    ConditionalModel::from_parts(
        model.spec.clone(),
        signal.to_string(),
        EstimatorKind::Empirical,
        options,
        buckets,
        Some(DistributionSummary::Empirical(fallback)),
    )
}

/// Evaluates the piecewise-linear quantile curve `(taus, preds)` at the
/// grid levels (j + 0.5)/G, extending flat beyond the outermost fitted
/// levels. `preds` must already be sorted ascending.
fn resample_grid(taus: &[f64], preds: &[f64], grid_size: usize) -> Vec<f64> {
    let last = taus.len() - 1;
    (0..grid_size)
        .map(|j| {
            let u = (j as f64 + 0.5) / grid_size as f64;
            if u <= taus[0] {
                return preds[0];
            }
            if u >= taus[last] {
                return preds[last];
            }
            // taus is strictly increasing, so the enclosing segment exists.
            let hi = taus.partition_point(|t| *t <= u);
            let (ta, tb) = (taus[hi - 1], taus[hi]);
            let (pa, pb) = (preds[hi - 1], preds[hi]);
            pa + (u - ta) / (tb - ta) * (pb - pa)
        })
        .collect()
}

fn validate_tau_levels(tau_levels: &[f64]) -> Result<()> {
    if tau_levels.is_empty() {
        return Err(Error::InvalidSpec("tau levels must be non-empty".into()));
    }
    for pair in tau_levels.windows(2) {
        if !(pair[0] < pair[1]) {
            return Err(Error::InvalidSpec(format!(
                "tau levels must be strictly increasing, got {} then {}",
                pair[0], pair[1]
            )));
        }
    }
    for &tau in tau_levels {
        if !(tau.is_finite() && tau > 0.0 && tau < 1.0) {
            return Err(Error::InvalidSpec(format!(
                "tau level must lie strictly inside (0, 1), got {tau}"
            )));
        }
    }
    Ok(())
}

/// One level's minibatch subgradient descent in standardized feature
/// space. The subgradient of the pinball loss with respect to the
/// prediction is 1[r<0] − τ for r ≠ 0 and 0 at r = 0, so exact fits are
/// fixed points. Iterates from the trailing epochs are averaged.
fn fit_level(
    xs: &[f64],
    features: &[Vec<f64>],
    tau: f64,
    init: f64,
    config: &QuantileRegConfig,
    seed: u64,
) -> Result<(f64, Vec<f64>)> {
    let n = xs.len();
    let d = features[0].len();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut b = init;
    let mut w = vec![0.0; d];
    let mut indices: Vec<usize> = (0..n).collect();

    let tail_epochs = ((config.epochs as f64 * config.tail_fraction).ceil() as usize).max(1);
    let tail_start = config.epochs - tail_epochs.min(config.epochs);
    let mut b_acc = 0.0;
    let mut w_acc = vec![0.0; d];
    let mut acc_n = 0u64;

    let mut best_loss = f64::INFINITY;
    for epoch in 0..config.epochs {
        indices.shuffle(&mut rng);
        let lr = config.learning_rate / (1.0 + config.learning_rate_decay * epoch as f64);
        for batch in indices.chunks(config.batch_size) {
            let mut gb = 0.0;
            let mut gw = vec![0.0; d];
            for &i in batch {
                let row = &features[i];
                let pred = b + w.iter().zip(row).map(|(wj, fj)| wj * fj).sum::<f64>();
                let r = xs[i] - pred;
                let g = if r < 0.0 {
                    1.0 - tau
                } else if r > 0.0 {
                    -tau
                } else {
                    0.0
                };
                gb += g;
                for j in 0..d {
                    gw[j] += g * row[j];
                }
            }
            let step = lr / batch.len() as f64;
            b -= step * gb;
            for j in 0..d {
                w[j] -= step * gw[j];
            }
            if epoch >= tail_start {
                b_acc += b;
                for j in 0..d {
                    w_acc[j] += w[j];
                }
                acc_n += 1;
            }
        }
        let loss = pinball_loss(xs, features, b, &w, tau);
        if loss > best_loss * (1.0 + config.loss_tolerance) + 1e-12 {
            return Err(Error::Diverged { epoch });
        }
        best_loss = best_loss.min(loss);
    }
    let inv = 1.0 / acc_n as f64;
    for wj in &mut w_acc {
        *wj *= inv;
    }
    Ok((b_acc * inv, w_acc))
}

fn pinball_loss(xs: &[f64], features: &[Vec<f64>], b: f64, w: &[f64], tau: f64) -> f64 {
    let total: f64 = xs
        .iter()
        .zip(features)
        .map(|(x, row)| {
            let pred = b + w.iter().zip(row).map(|(wj, fj)| wj * fj).sum::<f64>();
            let r = x - pred;
            r * (tau - f64::from(r < 0.0))
        })
        .sum();
    total / xs.len() as f64
}

#[derive(Serialize, Deserialize)]
struct QuantileRegRepr {
    spec: BiasSpec,
    tau_levels: Vec<f64>,
    coefficients: Vec<Vec<f64>>,
}

impl From<QuantileRegModel> for QuantileRegRepr {
    fn from(m: QuantileRegModel) -> Self {
        Self {
            spec: m.spec,
            tau_levels: m.tau_levels,
            coefficients: m.coefficients,
        }
    }
}

impl TryFrom<QuantileRegRepr> for QuantileRegModel {
    type Error = Error;

    fn try_from(repr: QuantileRegRepr) -> Result<Self> {
        validate_tau_levels(&repr.tau_levels)?;
        if repr.coefficients.len() != repr.tau_levels.len() {
            return Err(Error::Artifact(format!(
                "{} coefficient rows for {} tau levels",
                repr.coefficients.len(),
                repr.tau_levels.len()
            )));
        }
        let d = BiasFeatureEncoder::new(repr.spec.clone()).feature_len();
        for row in &repr.coefficients {
            if row.len() != d + 1 {
                return Err(Error::Artifact(format!(
                    "coefficient row of length {} does not match {} features plus intercept",
                    row.len(),
                    d
                )));
            }
            if let Some(bad) = row.iter().find(|c| !c.is_finite()) {
                return Err(Error::Artifact(format!("non-finite coefficient {bad}")));
            }
        }
        Ok(Self {
            spec: repr.spec,
            tau_levels: repr.tau_levels,
            coefficients: repr.coefficients,
        })
    }
}
