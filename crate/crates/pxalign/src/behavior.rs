//! Behavior predictors: the models that produce the predicted latent
//! value x for each signal.
//!
//! The predictor class is deliberately small: linear regression under
//! squared error for continuous behaviors and logistic regression under
//! cross-entropy for binary ones, both trained by seeded minibatch
//! gradient descent. Score alignment downstream does not care how x was
//! produced, so a minimal deterministic predictor keeps experiments
//! reproducible; [`oracle_predict`] bypasses training entirely by reading
//! the simulator's true latent value.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::mean_and_std;
use crate::simulate::GroundTruthRecord;

/// A validated fixed-length vector of finite feature values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct FeatureVector(Vec<f64>);

impl FeatureVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidValue(format!(
                "non-finite feature value {bad}"
            )));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl TryFrom<Vec<f64>> for FeatureVector {
    type Error = Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        Self::new(values)
    }
}

impl From<FeatureVector> for Vec<f64> {
    fn from(f: FeatureVector) -> Self {
        f.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinkKind {
    Identity,
    Logistic,
}

/// Minibatch gradient descent settings. The step size used at epoch e is
/// learning_rate / (1 + e / 4), which keeps early progress fast and the
/// late iterates stable. The L2 penalty applies to the weights in the
/// internally standardized parameterization, never to the intercept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub l2_penalty: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.5,
            epochs: 60,
            batch_size: 128,
            seed: 0,
            l2_penalty: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::InvalidSpec(format!(
                "learning rate must be positive and finite, got {}",
                self.learning_rate
            )));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidSpec("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidSpec("batch size must be at least 1".into()));
        }
        if !(self.l2_penalty.is_finite() && self.l2_penalty >= 0.0) {
            return Err(Error::InvalidSpec(format!(
                "l2 penalty must be non-negative, got {}",
                self.l2_penalty
            )));
        }
        Ok(())
    }
}

/// A linear model under an identity or logistic link.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PredictorRepr", into = "PredictorRepr")]
pub struct PredictorModel {
    signal: String,
    link: LinkKind,
    weights: Vec<f64>,
    intercept: f64,
}

impl PredictorModel {
    pub fn signal(&self) -> &str {
        &self.signal
    }

    pub fn link(&self) -> LinkKind {
        self.link
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn intercept(&self) -> f64 {
        self.intercept
    }

    /// x = link(w·f + b). Logistic outputs are clamped into the open
    /// interval (0, 1): the sigmoid itself rounds to exactly 1.0 beyond
    /// t ≈ 36.7.
    pub fn predict(&self, features: &FeatureVector) -> Result<f64> {
        if features.len() != self.weights.len() {
            return Err(Error::Incompatible(format!(
                "feature vector of length {} for a model with {} weights",
                features.len(),
                self.weights.len()
            )));
        }
        let t = self.intercept
            + self
                .weights
                .iter()
                .zip(features.values())
                .map(|(w, f)| w * f)
                .sum::<f64>();
        Ok(match self.link {
            LinkKind::Identity => t,
            LinkKind::Logistic => sigmoid(t).clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0),
        })
    }
}

/// Fits an identity-link model to (features, s) pairs by minimizing
/// 1/(2n) Σ (w·f + b − s)² plus the L2 penalty. The final full-pass loss
/// never exceeds the loss at initialization (intercept at the target
/// mean, zero weights); a non-finite or rising loss reports the epoch.
pub fn train_regressor(
    data: &[(FeatureVector, f64)],
    signal: &str,
    config: &TrainConfig,
) -> Result<PredictorModel> {
    for (_, s) in data {
        if !s.is_finite() {
            return Err(Error::InvalidValue(format!("non-finite target {s}")));
        }
    }
    let (weights, intercept) = train(data, Loss::Squared, config)?;
    Ok(PredictorModel {
        signal: signal.to_string(),
        link: LinkKind::Identity,
        weights,
        intercept,
    })
}

/// Fits a logistic-link model to (features, s) pairs with s ∈ {0, 1} by
/// minimizing mean binary cross-entropy plus the L2 penalty.
pub fn train_classifier(
    data: &[(FeatureVector, f64)],
    signal: &str,
    config: &TrainConfig,
) -> Result<PredictorModel> {
    for (_, s) in data {
        if *s != 0.0 && *s != 1.0 {
            return Err(Error::InvalidValue(format!(
                "classifier label must be 0 or 1, got {s}"
            )));
        }
    }
    let (weights, intercept) = train(data, Loss::Logistic, config)?;
    Ok(PredictorModel {
        signal: signal.to_string(),
        link: LinkKind::Logistic,
        weights,
        intercept,
    })
}

/// Returns the simulator's true latent x for `signal`, exactly as drawn.
/// Using this in place of a trained predictor isolates alignment behavior
/// from predictor error.
pub fn oracle_predict(record: &GroundTruthRecord, signal: &str) -> Result<f64> {
    record
        .x_latent
        .get(signal)
        .copied()
        .ok_or_else(|| Error::Data(format!("record carries no latent signal {signal:?}")))
}

#[derive(Clone, Copy)]
enum Loss {
    Squared,
    Logistic,
}

/// Shared minibatch descent in standardized feature space. Returns raw
/// feature-space (weights, intercept).
fn train(data: &[(FeatureVector, f64)], loss: Loss, config: &TrainConfig) -> Result<(Vec<f64>, f64)> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyInput("training on an empty sample".into()));
    }
    let d = data[0].0.len();
    if let Some((bad, _)) = data.iter().find(|(f, _)| f.len() != d) {
        return Err(Error::Incompatible(format!(
            "feature vectors of mixed lengths {} and {}",
            d,
            bad.len()
        )));
    }
    let targets: Vec<f64> = data.iter().map(|(_, s)| *s).collect();
    // Standardize columns; constant columns map to zero and keep zero
    // weight so the intercept absorbs them.
    let mut centers = vec![0.0; d];
    let mut scales = vec![0.0; d];
    for j in 0..d {
        let column: Vec<f64> = data.iter().map(|(f, _)| f.values()[j]).collect();
        let (mean, std) = mean_and_std(&column);
        centers[j] = mean;
        scales[j] = std;
    }
    let features: Vec<Vec<f64>> = data
        .iter()
        .map(|(f, _)| {
            (0..d)
                .map(|j| {
                    if scales[j] > 0.0 {
                        (f.values()[j] - centers[j]) / scales[j]
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect();

    let mut w = vec![0.0; d];
    let mut b = match loss {
        Loss::Squared => mean_and_std(&targets).0,
        Loss::Logistic => 0.0,
    };
    let initial_loss = full_loss(&targets, &features, &w, b, loss, config.l2_penalty);

    let n = targets.len();
    let mut rng = ChaCha12Rng::seed_from_u64(config.seed);
    let mut indices: Vec<usize> = (0..n).collect();
    let mut latest_loss = initial_loss;
    for epoch in 0..config.epochs {
        indices.shuffle(&mut rng);
        let lr = config.learning_rate / (1.0 + epoch as f64 / 4.0);
        for batch in indices.chunks(config.batch_size) {
            let mut gb = 0.0;
            let mut gw = vec![0.0; d];
            for &i in batch {
                let row = &features[i];
                let t = b + dot(&w, row);
                // d(loss)/d(linear term) for one sample.
                let g = match loss {
                    Loss::Squared => t - targets[i],
                    Loss::Logistic => sigmoid(t) - targets[i],
                };
                gb += g;
                for j in 0..d {
                    gw[j] += g * row[j];
                }
            }
            let step = lr / batch.len() as f64;
            b -= step * gb;
            for j in 0..d {
                w[j] -= step * (gw[j] + batch.len() as f64 * config.l2_penalty * w[j]);
            }
        }
        latest_loss = full_loss(&targets, &features, &w, b, loss, config.l2_penalty);
        if !latest_loss.is_finite() {
            return Err(Error::Diverged { epoch });
        }
    }
    if latest_loss > initial_loss + 1e-12 {
        return Err(Error::Diverged {
            epoch: config.epochs - 1,
        });
    }
    // Undo standardization: t = b + Σ wʲ·(fʲ − μʲ)/σʲ.
    let mut intercept = b;
    let mut weights = Vec::with_capacity(d);
    for j in 0..d {
        let wj = if scales[j] > 0.0 { w[j] / scales[j] } else { 0.0 };
        intercept -= wj * centers[j];
        weights.push(wj);
    }
    Ok((weights, intercept))
}

fn full_loss(
    targets: &[f64],
    features: &[Vec<f64>],
    w: &[f64],
    b: f64,
    loss: Loss,
    l2: f64,
) -> f64 {
    let n = targets.len() as f64;
    let data_term: f64 = targets
        .iter()
        .zip(features)
        .map(|(s, row)| {
            let t = b + dot(w, row);
            match loss {
                Loss::Squared => 0.5 * (t - s) * (t - s),
                Loss::Logistic => bce_from_logit(t, *s),
            }
        })
        .sum::<f64>()
        / n;
    data_term + 0.5 * l2 * dot(w, w)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Numerically stable σ(t) = 1 / (1 + e^{−t}).
fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy −[s·ln σ(t) + (1−s)·ln(1−σ(t))] computed from the
/// logit without forming σ(t), so large |t| cannot produce ln(0).
fn bce_from_logit(t: f64, s: f64) -> f64 {
    t.max(0.0) - t * s + (-t.abs()).exp().ln_1p()
}

#[derive(Serialize, Deserialize)]
struct PredictorRepr {
    signal: String,
    link: LinkKind,
    weights: Vec<f64>,
    intercept: f64,
}

impl From<PredictorModel> for PredictorRepr {
    fn from(m: PredictorModel) -> Self {
        Self {
            signal: m.signal,
            link: m.link,
            weights: m.weights,
            intercept: m.intercept,
        }
    }
}

impl TryFrom<PredictorRepr> for PredictorModel {
    type Error = Error;

    fn try_from(repr: PredictorRepr) -> Result<Self> {
        if let Some(bad) = repr
            .weights
            .iter()
            .chain(std::iter::once(&repr.intercept))
            .find(|v| !v.is_finite())
        {
            return Err(Error::Artifact(format!(
                "non-finite predictor coefficient {bad}"
            )));
        }
        Ok(Self {
            signal: repr.signal,
            link: repr.link,
            weights: repr.weights,
            intercept: repr.intercept,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::open01;
    use approx::assert_relative_eq;

    fn fv(values: &[f64]) -> FeatureVector {
        FeatureVector::new(values.to_vec()).unwrap()
    }

    fn long_train() -> TrainConfig {
        TrainConfig {
            epochs: 200,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn regressor_recovers_an_exact_line() {
        let data: Vec<(FeatureVector, f64)> = (0..200)
            .map(|i| {
                let f = i as f64 / 200.0;
                (fv(&[f]), 2.0 * f + 1.0)
            })
            .collect();
        let model = train_regressor(&data, "watch", &long_train()).unwrap();
        assert_relative_eq!(model.weights()[0], 2.0, epsilon = 1e-3);
        assert_relative_eq!(model.intercept(), 1.0, epsilon = 1e-3);
        assert_eq!(model.link(), LinkKind::Identity);
    }

    #[test]
    fn regressor_with_no_information_predicts_the_mean() {
        let data: Vec<(FeatureVector, f64)> =
            (0..50).map(|_| (fv(&[0.0]), 4.25)).collect();
        let model = train_regressor(&data, "watch", &TrainConfig::default()).unwrap();
        assert_relative_eq!(model.predict(&fv(&[0.0])).unwrap(), 4.25, epsilon = 1e-9);
    }

    #[test]
    fn classifier_converges_to_the_base_rate() {
        let data: Vec<(FeatureVector, f64)> = (0..1000)
            .map(|i| (fv(&[0.0]), f64::from(i % 10 < 3)))
            .collect();
        let model = train_classifier(&data, "click", &long_train()).unwrap();
        assert_relative_eq!(model.predict(&fv(&[0.0])).unwrap(), 0.3, epsilon = 1e-3);
    }

    #[test]
    fn classifier_separates_separable_data() {
        let mut data = Vec::new();
        for i in 0..100 {
            let f = i as f64 / 100.0;
            data.push((fv(&[f]), 0.0));
            data.push((fv(&[f + 2.0]), 1.0));
        }
        let config = TrainConfig {
            l2_penalty: 1e-4,
            epochs: 200,
            ..TrainConfig::default()
        };
        let model = train_classifier(&data, "click", &config).unwrap();
        let correct = data
            .iter()
            .filter(|(f, s)| {
                let p = model.predict(f).unwrap();
                (p >= 0.5) == (*s == 1.0)
            })
            .count();
        assert_eq!(correct, data.len());
    }

    #[test]
    fn single_class_data_saturates_upward() {
        let data: Vec<(FeatureVector, f64)> =
            (0..200).map(|i| (fv(&[i as f64 / 200.0]), 1.0)).collect();
        // The intercept of a single-class fit grows like the log of the
        // accumulated step mass, so this test needs a hot schedule.
        let config = TrainConfig {
            l2_penalty: 0.01,
            epochs: 300,
            learning_rate: 1.0,
            ..TrainConfig::default()
        };
        let model = train_classifier(&data, "click", &config).unwrap();
        assert!(model.predict(&fv(&[0.5])).unwrap() > 0.95);
    }

    #[test]
    fn predict_applies_the_link() {
        let zero: PredictorModel = serde_json::from_value(serde_json::json!({
            "signal": "click", "link": "logistic", "weights": [0.0], "intercept": 0.0
        }))
        .unwrap();
        assert_eq!(zero.predict(&fv(&[3.0])).unwrap(), 0.5);

        let line: PredictorModel = serde_json::from_value(serde_json::json!({
            "signal": "watch", "link": "identity", "weights": [2.0], "intercept": 1.0
        }))
        .unwrap();
        assert_eq!(line.predict(&fv(&[3.0])).unwrap(), 7.0);

        // sigma at the logit of Phi(1), against a direct evaluation.
        let logit: PredictorModel = serde_json::from_value(serde_json::json!({
            "signal": "click", "link": "logistic", "weights": [1.0], "intercept": 0.0
        }))
        .unwrap();
        let q = (0.8413447460685429f64 / (1.0 - 0.8413447460685429)).ln();
        assert_relative_eq!(
            logit.predict(&fv(&[q])).unwrap(),
            0.8413447460685429,
            epsilon = 1e-12
        );
    }

    #[test]
    fn logistic_outputs_stay_inside_the_open_interval() {
        let model: PredictorModel = serde_json::from_value(serde_json::json!({
            "signal": "click", "link": "logistic", "weights": [1.0], "intercept": 0.0
        }))
        .unwrap();
        let hi = model.predict(&fv(&[1e6])).unwrap();
        let lo = model.predict(&fv(&[-1e6])).unwrap();
        assert!(hi < 1.0 && hi > 0.99);
        assert!(lo > 0.0 && lo < 0.01);
    }

    #[test]
    fn gradients_match_central_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(42);
        let n = 6;
        let d = 3;
        let features: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..d).map(|_| open01(&mut rng) * 2.0 - 1.0).collect())
            .collect();
        let targets_reg: Vec<f64> = (0..n).map(|_| open01(&mut rng) * 4.0 - 2.0).collect();
        let targets_cls: Vec<f64> = (0..n).map(|_| f64::from(open01(&mut rng) > 0.4)).collect();
        let w: Vec<f64> = (0..d).map(|_| open01(&mut rng) - 0.5).collect();
        let b = 0.3;
        let l2 = 0.07;

        for (loss, targets) in [(Loss::Squared, &targets_reg), (Loss::Logistic, &targets_cls)] {
            // Analytic gradient of the full loss at (w, b).
            let mut gw = vec![0.0; d];
            let mut gb = 0.0;
            for i in 0..n {
                let t = b + dot(&w, &features[i]);
                let g = match loss {
                    Loss::Squared => t - targets[i],
                    Loss::Logistic => sigmoid(t) - targets[i],
                };
                gb += g / n as f64;
                for j in 0..d {
                    gw[j] += g * features[i][j] / n as f64;
                }
            }
            for j in 0..d {
                gw[j] += l2 * w[j];
            }
            let h = 1e-6;
            for j in 0..=d {
                let mut plus = w.clone();
                let mut minus = w.clone();
                let (bp, bm) = if j == d {
                    (b + h, b - h)
                } else {
                    plus[j] += h;
                    minus[j] -= h;
                    (b, b)
                };
                let numeric = (full_loss(targets, &features, &plus, bp, loss, l2)
                    - full_loss(targets, &features, &minus, bm, loss, l2))
                    / (2.0 * h);
                let analytic = if j == d { gb } else { gw[j] };
                assert_relative_eq!(numeric, analytic, max_relative = 1e-4);
            }
        }
    }

    #[test]
    fn training_is_deterministic() {
        // Noisy targets keep the SGD path seed-dependent; exact-line data
        // would converge to the same interpolant from any shuffle.
        let data: Vec<(FeatureVector, f64)> = (0..100)
            .map(|i| {
                let f = i as f64 / 100.0;
                (fv(&[f, f * f]), 1.5 * f - 0.25 + 0.2 * (i as f64).sin())
            })
            .collect();
        let config = TrainConfig {
            batch_size: 16,
            epochs: 20,
            ..TrainConfig::default()
        };
        let a = train_regressor(&data, "watch", &config).unwrap();
        let b = train_regressor(&data, "watch", &config).unwrap();
        assert_eq!(a, b);
        let c = train_regressor(&data, "watch", &TrainConfig { seed: 7, ..config }).unwrap();
        assert_ne!(a.weights(), c.weights());
    }

    #[test]
    fn invalid_inputs_are_rejected() {
        let data = vec![(fv(&[1.0]), 2.0)];
        assert!(matches!(
            train_regressor(&[], "watch", &TrainConfig::default()),
            Err(Error::EmptyInput(_))
        ));
        let zero_epochs = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        assert!(matches!(
            train_regressor(&data, "watch", &zero_epochs),
            Err(Error::InvalidSpec(_))
        ));
        assert!(matches!(
            train_classifier(&[(fv(&[1.0]), 0.5)], "click", &TrainConfig::default()),
            Err(Error::InvalidValue(_))
        ));
        assert!(matches!(
            train_regressor(&[(fv(&[1.0]), f64::NAN)], "watch", &TrainConfig::default()),
            Err(Error::InvalidValue(_))
        ));
        assert!(FeatureVector::new(vec![f64::INFINITY]).is_err());

        let model = train_regressor(&data, "watch", &TrainConfig::default()).unwrap();
        assert!(matches!(
            model.predict(&fv(&[1.0, 2.0])),
            Err(Error::Incompatible(_))
        ));
    }

    #[test]
    fn serde_round_trip_and_tampering() {
        let data: Vec<(FeatureVector, f64)> = (0..50)
            .map(|i| (fv(&[i as f64]), 3.0 * i as f64))
            .collect();
        let model = train_regressor(&data, "watch", &TrainConfig::default()).unwrap();
        let json = serde_json::to_string(&model).unwrap();
        let back: PredictorModel = serde_json::from_str(&json).unwrap();
        assert_eq!(back, model);

        let bad = serde_json::json!({
            "signal": "watch", "link": "identity", "weights": [f64::MAX], "intercept": null
        });
        assert!(serde_json::from_value::<PredictorModel>(bad).is_err());
    }
}
