//! Bias dimensions and their discretization into bucket keys.
//!
//! A bias factor is anything that shifts a predicted behavior score for
//! reasons unrelated to interest: exposure duration caps, send counts,
//! device class, position. Conditioning is always on the discretized
//! cross-product of the configured dimensions, so a `BiasKey` is the only
//! conditioning handle the rest of the crate sees.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DimensionKind {
    /// Integer codes `0..cardinality`, one bucket per code.
    Categorical { cardinality: usize },
    /// Real readings cut at `boundaries`: bucket `i` collects readings in
    /// `[boundaries[i-1], boundaries[i])`, with open buckets below the first
    /// and at or above the last boundary. `len + 1` buckets total.
    Continuous { boundaries: Vec<f64> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasDimension {
    pub name: String,
    #[serde(flatten)]
    pub kind: DimensionKind,
}

impl BiasDimension {
    pub fn bucket_count(&self) -> usize {
        match &self.kind {
            DimensionKind::Categorical { cardinality } => *cardinality,
            DimensionKind::Continuous { boundaries } => boundaries.len() + 1,
        }
    }
}

/// Validated list of bias dimensions. Construction is the only place the
/// well-formedness rules are checked; everything downstream trusts them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<BiasDimension>", into = "Vec<BiasDimension>")]
pub struct BiasSpec {
    dimensions: Vec<BiasDimension>,
}

impl BiasSpec {
    pub fn new(dimensions: Vec<BiasDimension>) -> Result<Self> {
        if dimensions.is_empty() {
            return Err(Error::InvalidSpec("bias spec has no dimensions".into()));
        }
        for (i, dim) in dimensions.iter().enumerate() {
            if dim.name.is_empty() {
                return Err(Error::InvalidSpec(format!("dimension {i} has an empty name")));
            }
            if dimensions[..i].iter().any(|d| d.name == dim.name) {
                return Err(Error::InvalidSpec(format!("duplicate dimension name {:?}", dim.name)));
            }
            match &dim.kind {
                DimensionKind::Categorical { cardinality } => {
                    if *cardinality == 0 {
                        return Err(Error::InvalidSpec(format!(
                            "dimension {:?} has zero cardinality",
                            dim.name
                        )));
                    }
                }
                DimensionKind::Continuous { boundaries } => {
                    if boundaries.iter().any(|b| !b.is_finite()) {
                        return Err(Error::InvalidSpec(format!(
                            "dimension {:?} has a non-finite boundary",
                            dim.name
                        )));
                    }
                    if boundaries.windows(2).any(|w| w[0] >= w[1]) {
                        return Err(Error::InvalidSpec(format!(
                            "dimension {:?} boundaries are not strictly increasing",
                            dim.name
                        )));
                    }
                }
            }
        }
        let mut total = 1usize;
        for dim in &dimensions {
            total = total.checked_mul(dim.bucket_count()).ok_or_else(|| {
                Error::InvalidSpec("bucket cross-product overflows usize".into())
            })?;
        }
        Ok(Self { dimensions })
    }

    pub fn dimensions(&self) -> &[BiasDimension] {
        &self.dimensions
    }

    pub fn bucket_counts(&self) -> Vec<usize> {
        self.dimensions.iter().map(BiasDimension::bucket_count).collect()
    }

    /// Size of the bucket cross-product.
    pub fn total_buckets(&self) -> usize {
        self.dimensions.iter().map(BiasDimension::bucket_count).product()
    }

    /// Maps raw readings (one per dimension, in spec order) to a bucket key.
    /// Categorical readings must be exact integer codes inside the
    /// cardinality; continuous readings must be finite.
    pub fn discretize(&self, readings: &[f64]) -> Result<BiasKey> {
        if readings.len() != self.dimensions.len() {
            return Err(Error::KeyMismatch(format!(
                "got {} readings for {} dimensions",
                readings.len(),
                self.dimensions.len()
            )));
        }
        let mut indices = Vec::with_capacity(readings.len());
        for (dim, &v) in self.dimensions.iter().zip(readings) {
            if !v.is_finite() {
                return Err(Error::InvalidValue(format!(
                    "non-finite reading {v} for dimension {:?}",
                    dim.name
                )));
            }
            let idx = match &dim.kind {
                DimensionKind::Categorical { cardinality } => {
                    if v.fract() != 0.0 || v < 0.0 || v >= *cardinality as f64 {
                        return Err(Error::InvalidValue(format!(
                            "reading {v} is not a code in 0..{} for dimension {:?}",
                            cardinality, dim.name
                        )));
                    }
                    v as usize
                }
                DimensionKind::Continuous { boundaries } => {
                    boundaries.partition_point(|b| *b <= v)
                }
            };
            indices.push(idx);
        }
        Ok(BiasKey(indices))
    }

    /// Checks that a key has the right arity and in-range indices.
    pub fn validate_key(&self, key: &BiasKey) -> Result<()> {
        if key.0.len() != self.dimensions.len() {
            return Err(Error::KeyMismatch(format!(
                "key has {} indices, spec has {} dimensions",
                key.0.len(),
                self.dimensions.len()
            )));
        }
        for (dim, &idx) in self.dimensions.iter().zip(&key.0) {
            if idx >= dim.bucket_count() {
                return Err(Error::KeyMismatch(format!(
                    "index {idx} out of range for dimension {:?} with {} buckets",
                    dim.name,
                    dim.bucket_count()
                )));
            }
        }
        Ok(())
    }

    /// Row-major position of a valid key within the bucket cross-product.
    pub fn key_index(&self, key: &BiasKey) -> usize {
        debug_assert!(self.validate_key(key).is_ok());
        let mut linear = 0usize;
        for (dim, &idx) in self.dimensions.iter().zip(&key.0) {
            linear = linear * dim.bucket_count() + idx;
        }
        linear
    }

    /// All keys of the cross-product in row-major order.
    pub fn all_keys(&self) -> Vec<BiasKey> {
        let counts = self.bucket_counts();
        let total = self.total_buckets();
        let mut keys = Vec::with_capacity(total);
        let mut current = vec![0usize; counts.len()];
        for _ in 0..total {
            keys.push(BiasKey(current.clone()));
            for d in (0..counts.len()).rev() {
                current[d] += 1;
                if current[d] < counts[d] {
                    break;
                }
                current[d] = 0;
            }
        }
        keys
    }
}

impl TryFrom<Vec<BiasDimension>> for BiasSpec {
    type Error = Error;
    fn try_from(dimensions: Vec<BiasDimension>) -> Result<Self> {
        Self::new(dimensions)
    }
}

impl From<BiasSpec> for Vec<BiasDimension> {
    fn from(spec: BiasSpec) -> Self {
        spec.dimensions
    }
}

/// Bucket indices, one per dimension in spec order. Ordered so it can key
/// deterministic maps.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BiasKey(Vec<usize>);

impl BiasKey {
    pub fn new(indices: Vec<usize>) -> Self {
        Self(indices)
    }

    pub fn indices(&self) -> &[usize] {
        &self.0
    }

    /// Stable text form used in reports, e.g. `"2:0"`. Parseable back via
    /// [`BiasKey::parse`].
    pub fn label(&self) -> String {
        self.0
            .iter()
            .map(usize::to_string)
            .collect::<Vec<_>>()
            .join(":")
    }

    pub fn parse(label: &str) -> Result<Self> {
        let indices = label
            .split(':')
            .map(|part| {
                part.parse::<usize>()
                    .map_err(|_| Error::InvalidValue(format!("bad bucket label {label:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self(indices))
    }
}

impl std::fmt::Display for BiasKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.label())
    }
}

/// Turns bucket keys into regression features: one-hot per categorical
/// dimension, bucket midpoint per continuous dimension. Edge buckets of a
/// continuous dimension extend outward by the width of the adjacent
/// interior bucket (or 1.0 when there is a single boundary), so every
/// bucket has a finite representative value.
#[derive(Clone, Debug)]
pub struct BiasFeatureEncoder {
    spec: BiasSpec,
}

impl BiasFeatureEncoder {
    pub fn new(spec: BiasSpec) -> Self {
        Self { spec }
    }

    pub fn spec(&self) -> &BiasSpec {
        &self.spec
    }

    pub fn into_spec(self) -> BiasSpec {
        self.spec
    }

    pub fn feature_len(&self) -> usize {
        self.spec
            .dimensions()
            .iter()
            .map(|dim| match &dim.kind {
                DimensionKind::Categorical { cardinality } => *cardinality,
                DimensionKind::Continuous { .. } => 1,
            })
            .sum()
    }

    pub fn encode(&self, key: &BiasKey) -> Result<Vec<f64>> {
        self.spec.validate_key(key)?;
        let mut features = Vec::with_capacity(self.feature_len());
        for (dim, &idx) in self.spec.dimensions().iter().zip(key.indices()) {
            match &dim.kind {
                DimensionKind::Categorical { cardinality } => {
                    for c in 0..*cardinality {
                        features.push(if c == idx { 1.0 } else { 0.0 });
                    }
                }
                DimensionKind::Continuous { boundaries } => {
                    features.push(bucket_midpoint(boundaries, idx));
                }
            }
        }
        Ok(features)
    }
}

fn bucket_midpoint(boundaries: &[f64], idx: usize) -> f64 {
    let k = boundaries.len();
    if k == 0 {
        return 0.0;
    }
    if idx == 0 {
        let width = if k >= 2 { boundaries[1] - boundaries[0] } else { 1.0 };
        boundaries[0] - width / 2.0
    } else if idx == k {
        let width = if k >= 2 { boundaries[k - 1] - boundaries[k - 2] } else { 1.0 };
        boundaries[k - 1] + width / 2.0
    } else {
        (boundaries[idx - 1] + boundaries[idx]) / 2.0
    }
}
