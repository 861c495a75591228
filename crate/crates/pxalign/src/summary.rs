//! Per-bucket distribution summaries: compressed empirical quantile grids
//! and two-parameter parametric fits.
//!
//! The empirical summary keeps the Hazen quantile grid of a sample: the
//! value at probability level (j − 0.5)/G for j = 1..G, linearly
//! interpolated between order statistics at plotting positions (i − 0.5)/n.
//! Queries view the summary as a piecewise-linear CDF through the knots
//!
//! ```text
//! (min, 1/(2n)), (grid[j], (j − 0.5)/G) for levels strictly inside
//! (1/(2n), 1 − 1/(2n)), (max, 1 − 1/(2n))
//! ```
//!
//! Grid entries whose levels fall outside that open interval are clamp
//! artifacts of the Hazen convention, not information, and are dropped from
//! the view. Runs of equal knot values are atoms: `cdf_interval` reports
//! their probability span [F⁻, F⁺], and the scalar `cdf` answers the
//! midpoint, which keeps it monotone and symmetric.
//!
//! Sums and counts are held exactly (see [`crate::exact::ExactSum`]), so
//! merges agree bitwise on count and mean regardless of merge order; grid
//! merges are approximate within interpolation tolerance, reconstructing
//! each part as a weighted sample and re-gridding the pooled set.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exact::ExactSum;
use crate::numeric::{normal_cdf, normal_quantile};

pub const DEFAULT_GRID_SIZE: usize = 1024;

/// Compressed empirical distribution of one bucket's samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalSummary {
    count: u64,
    mean: f64,
    min: f64,
    max: f64,
    exact_sum: ExactSum,
    grid: Vec<f64>,
}

impl EmpiricalSummary {
    /// Fits the Hazen grid of `values`. The input need not be sorted.
    pub fn fit(values: &[f64], grid_size: usize) -> Result<Self> {
        if grid_size < 2 {
            return Err(Error::InvalidSpec(format!(
                "grid size must be at least 2, got {grid_size}"
            )));
        }
        if values.is_empty() {
            return Err(Error::EmptyInput("empirical fit over an empty sample".into()));
        }
        if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidValue(format!("non-finite sample value {bad}")));
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let grid = (0..grid_size)
            .map(|j| hazen_quantile(&sorted, (j as f64 + 0.5) / grid_size as f64))
            .collect();
        let count = sorted.len() as u64;
        let exact_sum = ExactSum::from_values(values);
        Ok(Self {
            count,
            mean: exact_sum.mean(count),
            min: sorted[0],
            max: sorted[sorted.len() - 1],
            exact_sum,
            grid,
        })
    }

    /// Builds a summary whose grid was synthesized elsewhere (for example
    /// from a fitted quantile curve) while count, sum, and extremes come
    /// from the real sample. Extremes widen to cover the grid so the
    /// summary stays internally consistent.
    pub(crate) fn from_grid(
        count: u64,
        exact_sum: ExactSum,
        sample_min: f64,
        sample_max: f64,
        grid: Vec<f64>,
    ) -> Result<Self> {
        let summary = Self {
            count,
            mean: exact_sum.mean(count),
            min: sample_min.min(grid[0]),
            max: sample_max.max(grid[grid.len() - 1]),
            exact_sum,
            grid,
        };
        summary.validate(summary.grid.len())?;
        Ok(summary)
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn min(&self) -> f64 {
        self.min
    }

    pub fn max(&self) -> f64 {
        self.max
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    /// Probability that X ≤ x under the summary. At an atom this is the
    /// midpoint of [F⁻, F⁺]; outside the sample range it clamps to
    /// 1/(2n) below and 1 − 1/(2n) above.
    pub fn cdf(&self, x: f64) -> f64 {
        let (lo, hi) = self.cdf_interval(x);
        0.5 * (lo + hi)
    }

    /// [F⁻(x), F⁺(x)]: the probability span x occupies. Degenerate (a
    /// point) everywhere except at atoms.
    pub fn cdf_interval(&self, x: f64) -> (f64, f64) {
        let k = self.knots();
        let last = k.len() - 1;
        if x < k.value(0) {
            let p = k.prob(0);
            return (p, p);
        }
        if x > k.value(last) {
            let p = k.prob(last);
            return (p, p);
        }
        // First knot with value >= x; x is within [value(0), value(last)].
        let a = lower_bound(k.len(), |i| k.value(i) < x);
        if k.value(a) > x {
            // Strictly inside the segment (a-1, a): interpolate.
            let (va, pa) = (k.value(a - 1), k.prob(a - 1));
            let (vb, pb) = (k.value(a), k.prob(a));
            let p = pa + (x - va) / (vb - va) * (pb - pa);
            return (p, p);
        }
        // Run of knots equal to x spans the atom.
        let b = lower_bound(k.len(), |i| k.value(i) <= x) - 1;
        (k.prob(a), k.prob(b))
    }

    /// Generalized inverse of `cdf`. `0` maps to the sample minimum and `1`
    /// to the maximum; `tau` must already be validated into [0, 1].
    pub fn inv_cdf(&self, tau: f64) -> f64 {
        debug_assert!((0.0..=1.0).contains(&tau));
        let k = self.knots();
        let last = k.len() - 1;
        if tau <= k.prob(0) {
            return k.value(0);
        }
        if tau >= k.prob(last) {
            return k.value(last);
        }
        // Knot probabilities increase strictly whenever n > 1, so the
        // enclosing segment is unique.
        let a = lower_bound(k.len(), |i| k.prob(i) < tau);
        if k.prob(a) == tau {
            return k.value(a);
        }
        let (va, pa) = (k.value(a - 1), k.prob(a - 1));
        let (vb, pb) = (k.value(a), k.prob(a));
        if pb == pa {
            return va;
        }
        va + (tau - pa) / (pb - pa) * (vb - va)
    }

    /// Merges two summaries of the same grid size into a summary of the
    /// pooled sample. Count, sum, and extremes merge exactly; the grid is
    /// re-fit on a weighted reconstruction of both parts, so pooled-fit
    /// agreement is within interpolation tolerance (each part contributes
    /// error at most its mixture weight divided by min(count, G)).
    pub fn merge(&self, other: &Self) -> Result<Self> {
        if self.grid.len() != other.grid.len() {
            return Err(Error::Incompatible(format!(
                "grid sizes differ: {} vs {}",
                self.grid.len(),
                other.grid.len()
            )));
        }
        let mut points = Vec::with_capacity(self.pseudo_len() + other.pseudo_len());
        self.push_pseudo_samples(&mut points);
        other.push_pseudo_samples(&mut points);
        let grid = weighted_hazen_grid(&mut points, self.grid.len());

        let count = self.count + other.count;
        let mut exact_sum = self.exact_sum.clone();
        exact_sum.merge(&other.exact_sum);
        Ok(Self {
            count,
            mean: exact_sum.mean(count),
            min: self.min.min(other.min),
            max: self.max.max(other.max),
            exact_sum,
            grid,
        })
    }

    fn pseudo_len(&self) -> usize {
        (self.count as usize).min(self.grid.len())
    }

    /// Reconstructs the summary as a weighted sample. With n ≤ G the grid
    /// fully resolves the sample, so the n Hazen positions are read back
    /// (endpoints exactly); otherwise the grid values themselves stand in,
    /// each carrying weight n/G.
    fn push_pseudo_samples(&self, out: &mut Vec<(f64, f64)>) {
        let g = self.grid.len() as u64;
        if self.count <= g {
            let m = self.count;
            for i in 1..=m {
                let v = if i == 1 {
                    self.min
                } else if i == m {
                    self.max
                } else {
                    self.inv_cdf((i as f64 - 0.5) / m as f64)
                };
                out.push((v, 1.0));
            }
        } else {
            let w = self.count as f64 / g as f64;
            out.extend(self.grid.iter().map(|&v| (v, w)));
        }
    }

    pub(crate) fn validate(&self, grid_size: usize) -> Result<()> {
        let fail = |msg: String| Err(Error::Artifact(msg));
        if self.count == 0 {
            return fail("empirical summary with zero count".into());
        }
        if self.grid.len() != grid_size {
            return fail(format!(
                "grid has {} entries, expected {grid_size}",
                self.grid.len()
            ));
        }
        if !(self.min.is_finite() && self.max.is_finite() && self.min <= self.max) {
            return fail(format!("invalid sample range [{}, {}]", self.min, self.max));
        }
        if self.grid.iter().any(|v| !v.is_finite()) {
            return fail("non-finite grid entry".into());
        }
        if self.grid.windows(2).any(|w| w[0] > w[1]) {
            return fail("quantile grid is not non-decreasing".into());
        }
        if self.min > self.grid[0] || self.grid[self.grid.len() - 1] > self.max {
            return fail("quantile grid exceeds the sample range".into());
        }
        if self.mean.to_bits() != self.exact_sum.mean(self.count).to_bits() {
            return fail("stored mean disagrees with the exact sum".into());
        }
        Ok(())
    }

    fn knots(&self) -> Knots<'_> {
        let g = self.grid.len();
        let n = self.count as u128;
        // Integer form of: keep grid levels (j + 0.5)/G strictly inside
        // (1/(2n), 1 - 1/(2n)).
        let t = g as u128 / n;
        let j_lo = ((t + 1) / 2) as usize;
        let r = g as u128 * (2 * n - 1);
        let j_hi = (((r - 1) / n).saturating_sub(1) / 2).min(g as u128 - 1) as usize;
        let active = if j_lo <= j_hi { j_hi - j_lo + 1 } else { 0 };
        let lo = 0.5 / self.count as f64;
        Knots {
            grid: &self.grid,
            g: g as f64,
            min: self.min,
            max: self.max,
            lo,
            hi: 1.0 - lo,
            j_lo,
            active,
        }
    }
}

/// Piecewise-linear CDF view over the trimmed grid plus the extreme knots.
struct Knots<'a> {
    grid: &'a [f64],
    g: f64,
    min: f64,
    max: f64,
    lo: f64,
    hi: f64,
    j_lo: usize,
    active: usize,
}

impl Knots<'_> {
    fn len(&self) -> usize {
        self.active + 2
    }

    fn value(&self, i: usize) -> f64 {
        if i == 0 {
            self.min
        } else if i == self.active + 1 {
            self.max
        } else {
            self.grid[self.j_lo + i - 1]
        }
    }

    fn prob(&self, i: usize) -> f64 {
        if i == 0 {
            self.lo
        } else if i == self.active + 1 {
            self.hi
        } else {
            ((self.j_lo + i - 1) as f64 + 0.5) / self.g
        }
    }
}

/// Hazen quantile of a sorted sample at level `t`: linear interpolation of
/// order statistics at positions (i − 0.5)/n, clamped to the extremes.
pub(crate) fn hazen_quantile(sorted: &[f64], t: f64) -> f64 {
    let n = sorted.len();
    let r = t * n as f64 - 0.5;
    if r <= 0.0 {
        return sorted[0];
    }
    let i = r.floor() as usize;
    if i >= n - 1 {
        return sorted[n - 1];
    }
    sorted[i] + (r - i as f64) * (sorted[i + 1] - sorted[i])
}

/// Re-grids a weighted sample onto `grid_size` Hazen levels.
///
/// Points are grouped by exact value; a group of total weight w whose
/// lightest constituent weighs δ spans plotting positions
/// [(C + δ/2)/W, (C + w − δ/2)/W], which preserves atoms as flat spans and
/// collapses to the classic (i − 0.5)/n position for unit weights. Group
/// weights are summed in sorted order, so the result is independent of the
/// order in which the parts supplied their points.
fn weighted_hazen_grid(points: &mut Vec<(f64, f64)>, grid_size: usize) -> Vec<f64> {
    debug_assert!(!points.is_empty());
    points.sort_by(|a, b| a.0.total_cmp(&b.0));

    // (value, group weight, lightest member weight)
    let mut groups: Vec<(f64, f64, f64)> = Vec::new();
    let mut scratch: Vec<f64> = Vec::new();
    let mut i = 0;
    while i < points.len() {
        let v = points[i].0;
        scratch.clear();
        while i < points.len() && points[i].0 == v {
            scratch.push(points[i].1);
            i += 1;
        }
        scratch.sort_by(f64::total_cmp);
        let total: f64 = scratch.iter().sum();
        groups.push((v, total, scratch[0]));
    }
    let w_all: f64 = groups.iter().map(|g| g.1).sum();

    let mut knots: Vec<(f64, f64)> = Vec::with_capacity(groups.len() * 2);
    let mut c = 0.0f64;
    for &(v, w, d) in &groups {
        let p_lo = (c + d / 2.0) / w_all;
        let p_hi = (c + (w - d / 2.0)) / w_all;
        knots.push((p_lo, v));
        if p_hi > p_lo {
            knots.push((p_hi, v));
        }
        c += w;
    }

    let last = knots.len() - 1;
    (0..grid_size)
        .map(|j| {
            let t = (j as f64 + 0.5) / grid_size as f64;
            if t <= knots[0].0 {
                return knots[0].1;
            }
            if t >= knots[last].0 {
                return knots[last].1;
            }
            let a = lower_bound(knots.len(), |i| knots[i].0 < t);
            let (pb, vb) = knots[a];
            if pb == t {
                return vb;
            }
            let (pa, va) = knots[a - 1];
            if pb == pa {
                return va;
            }
            va + (t - pa) / (pb - pa) * (vb - va)
        })
        .collect()
}

/// First index in `0..len` where `below` turns false; `below` must be
/// monotone (true prefix then false suffix).
fn lower_bound(len: usize, mut below: impl FnMut(usize) -> bool) -> usize {
    let (mut lo, mut hi) = (0usize, len);
    while lo < hi {
        let mid = (lo + hi) / 2;
        if below(mid) {
            lo = mid + 1;
        } else {
            hi = mid;
        }
    }
    lo
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParametricFamily {
    Gaussian,
    Lognormal,
}

impl ParametricFamily {
    /// Maps an observation into the family's fitting space (identity for
    /// gaussian, log for lognormal).
    fn to_fit_space(self, x: f64) -> Result<f64> {
        match self {
            Self::Gaussian => Ok(x),
            Self::Lognormal => {
                if x <= 0.0 {
                    Err(Error::InvalidValue(format!(
                        "lognormal fit requires positive samples, got {x}"
                    )))
                } else {
                    Ok(x.ln())
                }
            }
        }
    }

    pub fn cdf(self, x: f64, location: f64, scale: f64) -> f64 {
        debug_assert!(scale > 0.0);
        match self {
            Self::Gaussian => normal_cdf((x - location) / scale),
            Self::Lognormal => {
                if x <= 0.0 {
                    0.0
                } else {
                    normal_cdf((x.ln() - location) / scale)
                }
            }
        }
    }

    pub fn inv_cdf(self, tau: f64, location: f64, scale: f64) -> f64 {
        debug_assert!(scale > 0.0);
        let q = normal_quantile(tau);
        match self {
            Self::Gaussian => location + scale * q,
            Self::Lognormal => (location + scale * q).exp(),
        }
    }

    /// Expectation of the family at the given parameters.
    pub fn mean(self, location: f64, scale: f64) -> f64 {
        match self {
            Self::Gaussian => location,
            Self::Lognormal => (location + scale * scale / 2.0).exp(),
        }
    }
}

/// Two-parameter fit of one bucket's samples. Location and scale are the
/// maximum-likelihood estimates (population 1/n convention for the scale)
/// in the family's fitting space; the exact power sums are retained so that
/// merged fits equal the pooled fit bitwise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParametricSummary {
    family: ParametricFamily,
    count: u64,
    location: f64,
    scale: f64,
    exact_sum: ExactSum,
    exact_sum_sq: ExactSum,
}

impl ParametricSummary {
    pub fn fit(values: &[f64], family: ParametricFamily) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptyInput("parametric fit over an empty sample".into()));
        }
        if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidValue(format!("non-finite sample value {bad}")));
        }
        let mut exact_sum = ExactSum::zero();
        let mut exact_sum_sq = ExactSum::zero();
        for &v in values {
            let t = family.to_fit_space(v)?;
            exact_sum.add(t);
            exact_sum_sq.add(t * t);
        }
        let count = values.len() as u64;
        let (location, scale) = derive_params(&exact_sum, &exact_sum_sq, count);
        Ok(Self {
            family,
            count,
            location,
            scale,
            exact_sum,
            exact_sum_sq,
        })
    }

    pub fn family(&self) -> ParametricFamily {
        self.family
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn location(&self) -> f64 {
        self.location
    }

    /// Raw fitted scale; exactly 0 for a degenerate bucket, in which case
    /// queries substitute the fallback's scale.
    pub fn scale(&self) -> f64 {
        self.scale
    }

    /// Expectation of the fitted law.
    pub fn mean(&self) -> f64 {
        self.family.mean(self.location, self.scale)
    }

    pub fn merge(&self, other: &Self) -> Result<Self> {
        if self.family != other.family {
            return Err(Error::Incompatible(format!(
                "parametric families differ: {:?} vs {:?}",
                self.family, other.family
            )));
        }
        let mut exact_sum = self.exact_sum.clone();
        exact_sum.merge(&other.exact_sum);
        let mut exact_sum_sq = self.exact_sum_sq.clone();
        exact_sum_sq.merge(&other.exact_sum_sq);
        let count = self.count + other.count;
        let (location, scale) = derive_params(&exact_sum, &exact_sum_sq, count);
        Ok(Self {
            family: self.family,
            count,
            location,
            scale,
            exact_sum,
            exact_sum_sq,
        })
    }

    pub(crate) fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Artifact(msg));
        if self.count == 0 {
            return fail("parametric summary with zero count".into());
        }
        if !(self.location.is_finite() && self.scale.is_finite() && self.scale >= 0.0) {
            return fail(format!(
                "invalid parameters location={} scale={}",
                self.location, self.scale
            ));
        }
        let (location, scale) = derive_params(&self.exact_sum, &self.exact_sum_sq, self.count);
        if self.location.to_bits() != location.to_bits() || self.scale.to_bits() != scale.to_bits()
        {
            return fail("stored parameters disagree with the exact sums".into());
        }
        Ok(())
    }
}

fn derive_params(sum: &ExactSum, sum_sq: &ExactSum, count: u64) -> (f64, f64) {
    let location = sum.mean(count);
    let var = sum_sq.mean(count) - location * location;
    (location, var.max(0.0).sqrt())
}

/// One bucket's distribution, either representation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DistributionSummary {
    Empirical(EmpiricalSummary),
    Parametric(ParametricSummary),
}

impl DistributionSummary {
    pub fn count(&self) -> u64 {
        match self {
            Self::Empirical(s) => s.count(),
            Self::Parametric(s) => s.count(),
        }
    }

    /// The summary's own expectation: arithmetic sample mean for empirical,
    /// the fitted family's mean for parametric.
    pub fn mean(&self) -> f64 {
        match self {
            Self::Empirical(s) => s.mean(),
            Self::Parametric(s) => s.mean(),
        }
    }

    pub fn merge(&self, other: &Self) -> Result<Self> {
        match (self, other) {
            (Self::Empirical(a), Self::Empirical(b)) => Ok(Self::Empirical(a.merge(b)?)),
            (Self::Parametric(a), Self::Parametric(b)) => Ok(Self::Parametric(a.merge(b)?)),
            _ => Err(Error::Incompatible(
                "cannot merge empirical with parametric summaries".into(),
            )),
        }
    }

    pub(crate) fn validate(&self, grid_size: usize) -> Result<()> {
        match self {
            Self::Empirical(s) => s.validate(grid_size),
            Self::Parametric(s) => s.validate(),
        }
    }
}
