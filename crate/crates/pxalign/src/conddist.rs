//! Conditional distribution models: F(X | Y = key) per bias bucket.
//!
//! A fitted model holds one [`DistributionSummary`] per observed bucket plus
//! a fallback summary over the full training stream. Raw observations may
//! first pass through a transform space (log1p for heavy-tailed durations);
//! `cdf` accepts raw values and `inv_cdf` returns raw values, while
//! `cond_mean` reports the mean in transform space, which is the space mean
//! alignment operates in.
//!
//! Sparse buckets (count below `min_bucket_count`) are never answered from
//! their raw statistics alone: distribution queries blend the bucket with
//! the fallback as a mixture weighted n : k, and parametric queries blend
//! the parameters themselves. `cond_mean` applies the same n : k blend
//! unconditionally, so a generous shrinkage strength steadies small-bucket
//! means without touching dense-bucket distribution shapes.
//!
//! Models are immutable once fitted; queries are pure, so sharing across
//! threads needs no synchronization. Partial models fitted on disjoint
//! shards combine with [`ConditionalModel::merge`].

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::bias::{BiasKey, BiasSpec};
use crate::error::{Error, Result};
use crate::summary::{
    DistributionSummary, EmpiricalSummary, ParametricFamily, ParametricSummary, DEFAULT_GRID_SIZE,
};

pub const DEFAULT_MIN_BUCKET_COUNT: u64 = 100;
pub const DEFAULT_SHRINKAGE: f64 = 50.0;

/// Space observations are mapped into before any statistics are computed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformSpace {
    #[default]
    Identity,
    Log1p,
}

impl TransformSpace {
    pub fn apply(self, x: f64) -> Result<f64> {
        let t = match self {
            Self::Identity => x,
            Self::Log1p => x.ln_1p(),
        };
        if t.is_finite() {
            Ok(t)
        } else {
            Err(Error::InvalidValue(format!(
                "value {x} is not finite under the {self:?} transform"
            )))
        }
    }

    pub fn invert(self, t: f64) -> f64 {
        match self {
            Self::Identity => t,
            Self::Log1p => t.exp_m1(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub grid_size: usize,
    pub min_bucket_count: u64,
    pub shrinkage_strength: f64,
    pub transform: TransformSpace,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            grid_size: DEFAULT_GRID_SIZE,
            min_bucket_count: DEFAULT_MIN_BUCKET_COUNT,
            shrinkage_strength: DEFAULT_SHRINKAGE,
            transform: TransformSpace::Identity,
        }
    }
}

impl FitOptions {
    pub fn validate(&self) -> Result<()> {
        if self.grid_size < 2 {
            return Err(Error::InvalidSpec(format!(
                "grid_size must be at least 2, got {}",
                self.grid_size
            )));
        }
        if self.min_bucket_count == 0 {
            return Err(Error::InvalidSpec("min_bucket_count must be positive".into()));
        }
        if !self.shrinkage_strength.is_finite() || self.shrinkage_strength < 0.0 {
            return Err(Error::InvalidSpec(format!(
                "shrinkage_strength must be a non-negative real, got {}",
                self.shrinkage_strength
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    Empirical,
    Gaussian,
    Lognormal,
}

impl EstimatorKind {
    pub fn family(self) -> Option<ParametricFamily> {
        match self {
            Self::Empirical => None,
            Self::Gaussian => Some(ParametricFamily::Gaussian),
            Self::Lognormal => Some(ParametricFamily::Lognormal),
        }
    }
}

/// Per-bucket conditional distribution of one signal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ModelRepr", into = "ModelRepr")]
pub struct ConditionalModel {
    spec: BiasSpec,
    signal: String,
    estimator: EstimatorKind,
    options: FitOptions,
    buckets: BTreeMap<BiasKey, DistributionSummary>,
    fallback: Option<DistributionSummary>,
}

impl ConditionalModel {
    /// A model with no data: the identity element of `merge`. Queries on
    /// it fail with `EmptyInput`.
    pub fn empty(
        spec: BiasSpec,
        signal: impl Into<String>,
        estimator: EstimatorKind,
        options: FitOptions,
    ) -> Result<Self> {
        options.validate()?;
        Ok(Self {
            spec,
            signal: signal.into(),
            estimator,
            options,
            buckets: BTreeMap::new(),
            fallback: None,
        })
    }

    pub fn fit_empirical(
        records: impl IntoIterator<Item = (f64, BiasKey)>,
        spec: BiasSpec,
        signal: impl Into<String>,
        options: FitOptions,
    ) -> Result<Self> {
        options.validate()?;
        let (per_bucket, all) = group_records(records, &spec, options.transform)?;
        let mut buckets = BTreeMap::new();
        for (key, values) in per_bucket {
            let summary = EmpiricalSummary::fit(&values, options.grid_size)?;
            buckets.insert(key, DistributionSummary::Empirical(summary));
        }
        let fallback = DistributionSummary::Empirical(EmpiricalSummary::fit(
            &all,
            options.grid_size,
        )?);
        Ok(Self {
            spec,
            signal: signal.into(),
            estimator: EstimatorKind::Empirical,
            options,
            buckets,
            fallback: Some(fallback),
        })
    }

    pub fn fit_parametric(
        records: impl IntoIterator<Item = (f64, BiasKey)>,
        spec: BiasSpec,
        signal: impl Into<String>,
        family: ParametricFamily,
        options: FitOptions,
    ) -> Result<Self> {
        options.validate()?;
        let (per_bucket, all) = group_records(records, &spec, options.transform)?;
        let fallback = ParametricSummary::fit(&all, family)?;
        if fallback.scale() == 0.0 {
            return Err(Error::Degenerate(
                "fallback fit has zero scale; no usable substitute for degenerate buckets".into(),
            ));
        }
        let mut buckets = BTreeMap::new();
        for (key, values) in per_bucket {
            let summary = ParametricSummary::fit(&values, family)?;
            buckets.insert(key, DistributionSummary::Parametric(summary));
        }
        let estimator = match family {
            ParametricFamily::Gaussian => EstimatorKind::Gaussian,
            ParametricFamily::Lognormal => EstimatorKind::Lognormal,
        };
        Ok(Self {
            spec,
            signal: signal.into(),
            estimator,
            options,
            buckets,
            fallback: Some(DistributionSummary::Parametric(fallback)),
        })
    }

    /// Replaces the bucket map and fallback wholesale; used by estimators
    /// that synthesize summaries rather than fitting them directly from
    /// per-bucket samples. Validates the result as if it were deserialized.
    pub(crate) fn from_parts(
        spec: BiasSpec,
        signal: String,
        estimator: EstimatorKind,
        options: FitOptions,
        buckets: BTreeMap<BiasKey, DistributionSummary>,
        fallback: Option<DistributionSummary>,
    ) -> Result<Self> {
        let repr = ModelRepr {
            spec,
            signal,
            estimator,
            options,
            buckets: buckets
                .into_iter()
                .map(|(key, summary)| BucketEntry { key, summary })
                .collect(),
            fallback,
        };
        Self::try_from(repr)
    }

    pub fn spec(&self) -> &BiasSpec {
        &self.spec
    }

    pub fn signal(&self) -> &str {
        &self.signal
    }

    pub fn estimator(&self) -> EstimatorKind {
        self.estimator
    }

    pub fn options(&self) -> &FitOptions {
        &self.options
    }

    pub fn transform(&self) -> TransformSpace {
        self.options.transform
    }

    pub fn is_empty(&self) -> bool {
        self.fallback.is_none()
    }

    pub fn bucket_keys(&self) -> impl Iterator<Item = &BiasKey> {
        self.buckets.keys()
    }

    /// Number of training observations in the bucket (0 if never seen).
    pub fn bucket_count(&self, key: &BiasKey) -> Result<u64> {
        self.spec.validate_key(key)?;
        Ok(self.buckets.get(key).map_or(0, DistributionSummary::count))
    }

    pub fn total_count(&self) -> u64 {
        self.fallback.as_ref().map_or(0, DistributionSummary::count)
    }

    pub fn fallback_summary(&self) -> Option<&DistributionSummary> {
        self.fallback.as_ref()
    }

    /// P(X ≤ x | Y = key) for a raw-space x.
    pub fn cdf(&self, key: &BiasKey, x: f64) -> Result<f64> {
        let (lo, hi) = self.cdf_interval(key, x)?;
        Ok(0.5 * (lo + hi))
    }

    /// [F⁻(x), F⁺(x)] for a raw-space x: the probability span x occupies
    /// under the bucket's law. Degenerate except at empirical atoms.
    pub fn cdf_interval(&self, key: &BiasKey, x: f64) -> Result<(f64, f64)> {
        let t = self.options.transform.apply(x)?;
        Ok(match self.resolve(key)? {
            Resolved::Empirical(s) => s.cdf_interval(t),
            Resolved::EmpiricalBlend { bucket, fallback, w } => {
                let (blo, bhi) = bucket.cdf_interval(t);
                let (flo, fhi) = fallback.cdf_interval(t);
                (w * blo + (1.0 - w) * flo, w * bhi + (1.0 - w) * fhi)
            }
            Resolved::Parametric { family, location, scale } => {
                let p = family.cdf(t, location, scale);
                (p, p)
            }
        })
    }

    /// Generalized inverse of `cdf`, returned in raw space. `tau` must be
    /// in [0, 1]; 0 and 1 map to the support endpoints (infinite for
    /// unbounded parametric families).
    pub fn inv_cdf(&self, key: &BiasKey, tau: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&tau) {
            return Err(Error::InvalidValue(format!(
                "quantile level {tau} outside [0, 1]"
            )));
        }
        let t = match self.resolve(key)? {
            Resolved::Empirical(s) => s.inv_cdf(tau),
            Resolved::EmpiricalBlend { bucket, fallback, w } => {
                let lo = bucket.min().min(fallback.min());
                let hi = bucket.max().max(fallback.max());
                if tau == 0.0 {
                    lo
                } else if tau == 1.0 {
                    hi
                } else {
                    let f = |x: f64| {
                        w * bucket.cdf(x) + (1.0 - w) * fallback.cdf(x)
                    };
                    bisect_inverse(f, tau, lo, hi)
                }
            }
            Resolved::Parametric { family, location, scale } => {
                family.inv_cdf(tau, location, scale)
            }
        };
        Ok(self.options.transform.invert(t))
    }

    /// Shrunken conditional mean in transform space:
    /// (n·mean_bucket + k·mean_fallback) / (n + k).
    pub fn cond_mean(&self, key: &BiasKey) -> Result<f64> {
        self.spec.validate_key(key)?;
        let fallback = self.fallback()?;
        let Some(bucket) = self.buckets.get(key) else {
            return Ok(fallback.mean());
        };
        let k = self.options.shrinkage_strength;
        if k == 0.0 {
            return Ok(bucket.mean());
        }
        let n = bucket.count() as f64;
        Ok((n * bucket.mean() + k * fallback.mean()) / (n + k))
    }

    /// Combines two models fitted on disjoint shards of the same stream.
    /// Counts and means combine exactly (any merge order yields bitwise
    /// identical values); empirical grids combine within interpolation
    /// tolerance of the pooled fit.
    pub fn merge(&self, other: &Self) -> Result<Self> {
        if self.spec != other.spec {
            return Err(Error::Incompatible("bias specs differ".into()));
        }
        if self.signal != other.signal {
            return Err(Error::Incompatible(format!(
                "signal names differ: {:?} vs {:?}",
                self.signal, other.signal
            )));
        }
        if self.estimator != other.estimator {
            return Err(Error::Incompatible("estimators differ".into()));
        }
        if self.options != other.options {
            return Err(Error::Incompatible("fit options differ".into()));
        }
        let mut buckets = self.buckets.clone();
        for (key, summary) in &other.buckets {
            match buckets.get_mut(key) {
                Some(existing) => *existing = existing.merge(summary)?,
                None => {
                    buckets.insert(key.clone(), summary.clone());
                }
            }
        }
        let fallback = match (&self.fallback, &other.fallback) {
            (Some(a), Some(b)) => Some(a.merge(b)?),
            (Some(a), None) => Some(a.clone()),
            (None, b) => b.clone(),
        };
        Ok(Self {
            spec: self.spec.clone(),
            signal: self.signal.clone(),
            estimator: self.estimator,
            options: self.options.clone(),
            buckets,
            fallback,
        })
    }

    fn fallback(&self) -> Result<&DistributionSummary> {
        self.fallback
            .as_ref()
            .ok_or_else(|| Error::EmptyInput("model holds no data".into()))
    }

    fn resolve(&self, key: &BiasKey) -> Result<Resolved<'_>> {
        self.spec.validate_key(key)?;
        let fallback = self.fallback()?;
        let bucket = self.buckets.get(key);

        match self.estimator.family() {
            None => {
                let DistributionSummary::Empirical(f) = fallback else {
                    return Err(Error::Artifact("empirical model with parametric fallback".into()));
                };
                let b = match bucket {
                    None => return Ok(Resolved::Empirical(f)),
                    Some(DistributionSummary::Empirical(b)) => b,
                    Some(DistributionSummary::Parametric(_)) => {
                        return Err(Error::Artifact(
                            "empirical model holds a parametric bucket".into(),
                        ))
                    }
                };
                if b.count() >= self.options.min_bucket_count {
                    return Ok(Resolved::Empirical(b));
                }
                let k = self.options.shrinkage_strength;
                let w = b.count() as f64 / (b.count() as f64 + k);
                if w == 1.0 {
                    return Ok(Resolved::Empirical(b));
                }
                Ok(Resolved::EmpiricalBlend { bucket: b, fallback: f, w })
            }
            Some(family) => {
                let DistributionSummary::Parametric(f) = fallback else {
                    return Err(Error::Artifact("parametric model with empirical fallback".into()));
                };
                let b = match bucket {
                    None => {
                        return Ok(Resolved::Parametric {
                            family,
                            location: f.location(),
                            scale: f.scale(),
                        })
                    }
                    Some(DistributionSummary::Parametric(b)) => b,
                    Some(DistributionSummary::Empirical(_)) => {
                        return Err(Error::Artifact(
                            "parametric model holds an empirical bucket".into(),
                        ))
                    }
                };
                // Degenerate bucket scale borrows the fallback's scale.
                let scale_b = if b.scale() > 0.0 { b.scale() } else { f.scale() };
                if b.count() >= self.options.min_bucket_count {
                    return Ok(Resolved::Parametric {
                        family,
                        location: b.location(),
                        scale: scale_b,
                    });
                }
                let k = self.options.shrinkage_strength;
                let n = b.count() as f64;
                let w = n / (n + k);
                if w == 1.0 {
                    return Ok(Resolved::Parametric {
                        family,
                        location: b.location(),
                        scale: scale_b,
                    });
                }
                Ok(Resolved::Parametric {
                    family,
                    location: w * b.location() + (1.0 - w) * f.location(),
                    scale: w * scale_b + (1.0 - w) * f.scale(),
                })
            }
        }
    }
}

enum Resolved<'a> {
    Empirical(&'a EmpiricalSummary),
    EmpiricalBlend {
        bucket: &'a EmpiricalSummary,
        fallback: &'a EmpiricalSummary,
        w: f64,
    },
    Parametric {
        family: ParametricFamily,
        location: f64,
        scale: f64,
    },
}

fn group_records(
    records: impl IntoIterator<Item = (f64, BiasKey)>,
    spec: &BiasSpec,
    transform: TransformSpace,
) -> Result<(BTreeMap<BiasKey, Vec<f64>>, Vec<f64>)> {
    let mut per_bucket: BTreeMap<BiasKey, Vec<f64>> = BTreeMap::new();
    let mut all = Vec::new();
    for (x, key) in records {
        spec.validate_key(&key)?;
        let t = transform.apply(x)?;
        per_bucket.entry(key).or_default().push(t);
        all.push(t);
    }
    if all.is_empty() {
        return Err(Error::EmptyInput("fit over an empty record stream".into()));
    }
    Ok((per_bucket, all))
}

/// Leftmost x in [lo, hi] with f(x) ≥ tau, for monotone non-decreasing f
/// bracketing tau. Pure bisection: deterministic and atom-safe.
fn bisect_inverse(f: impl Fn(f64) -> f64, tau: f64, mut lo: f64, mut hi: f64) -> f64 {
    if lo >= hi {
        return hi;
    }
    if f(lo) >= tau {
        return lo;
    }
    for _ in 0..1100 {
        let mid = 0.5 * (lo + hi);
        if !(mid > lo && mid < hi) {
            break;
        }
        if f(mid) >= tau {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    hi
}

/// Serialized form: buckets as sorted key/summary entries (map keys are
/// not JSON-safe), revalidated on load.
#[derive(Serialize, Deserialize)]
struct ModelRepr {
    spec: BiasSpec,
    signal: String,
    estimator: EstimatorKind,
    options: FitOptions,
    buckets: Vec<BucketEntry>,
    fallback: Option<DistributionSummary>,
}

#[derive(Serialize, Deserialize)]
struct BucketEntry {
    key: BiasKey,
    summary: DistributionSummary,
}

impl From<ConditionalModel> for ModelRepr {
    fn from(model: ConditionalModel) -> Self {
        Self {
            spec: model.spec,
            signal: model.signal,
            estimator: model.estimator,
            options: model.options,
            buckets: model
                .buckets
                .into_iter()
                .map(|(key, summary)| BucketEntry { key, summary })
                .collect(),
            fallback: model.fallback,
        }
    }
}

impl TryFrom<ModelRepr> for ConditionalModel {
    type Error = Error;

    fn try_from(repr: ModelRepr) -> Result<Self> {
        repr.options.validate()?;
        let ModelRepr { spec, signal, estimator, options, buckets, fallback } = repr;

        let check_kind = |summary: &DistributionSummary, what: &str| -> Result<()> {
            summary.validate(options.grid_size)?;
            match (estimator.family(), summary) {
                (None, DistributionSummary::Empirical(_)) => Ok(()),
                (Some(family), DistributionSummary::Parametric(p)) if p.family() == family => {
                    Ok(())
                }
                _ => Err(Error::Artifact(format!(
                    "{what} summary does not match the {estimator:?} estimator"
                ))),
            }
        };

        let mut map = BTreeMap::new();
        let mut prev: Option<BiasKey> = None;
        for entry in buckets {
            spec.validate_key(&entry.key)?;
            if prev.as_ref().is_some_and(|p| *p >= entry.key) {
                return Err(Error::Artifact("bucket keys not sorted or duplicated".into()));
            }
            check_kind(&entry.summary, "bucket")?;
            prev = Some(entry.key.clone());
            map.insert(entry.key, entry.summary);
        }
        match &fallback {
            Some(f) => {
                check_kind(f, "fallback")?;
                if let DistributionSummary::Parametric(p) = f {
                    if p.scale() == 0.0 {
                        return Err(Error::Artifact("fallback has zero scale".into()));
                    }
                }
            }
            None => {
                if !map.is_empty() {
                    return Err(Error::Artifact("buckets present without a fallback".into()));
                }
            }
        }
        Ok(Self {
            spec,
            signal,
            estimator,
            options,
            buckets: map,
            fallback,
        })
    }
}
