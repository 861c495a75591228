//! Independence, uniformity, and recovery diagnostics.
//!
//! These estimators are the empirical check on the library's central
//! claim: after conditional quantile mapping, scores carry no information
//! about the bias bucket. Mutual information is a plug-in histogram
//! estimate and is positively biased at finite n, so it is always
//! reported next to a permutation noise floor: the same estimator run on
//! the same data with bucket labels shuffled. "Independent" means "within
//! a small multiple of the floor", never "exactly zero".

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::align::TargetDistribution;
use crate::bias::BiasKey;
use crate::error::{Error, Result};
use crate::numeric::{mean_and_std, mix_seed};

/// Plug-in mutual information in nats with its permutation baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiEstimate {
    pub nats: f64,
    pub n_bins_z: usize,
    pub n_samples: usize,
    pub noise_floor_nats: f64,
}

/// Exact Kolmogorov-Smirnov statistic. `threshold` is the acceptance
/// policy the caller applied, recorded for reporting; the statistic
/// itself is policy-free.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KsResult {
    pub d_statistic: f64,
    pub n_samples: usize,
    pub threshold: Option<f64>,
}

impl KsResult {
    pub fn with_threshold(mut self, threshold: f64) -> Self {
        self.threshold = Some(threshold);
        self
    }

    /// True when a threshold is recorded and the statistic is within it.
    pub fn passes(&self) -> Option<bool> {
        self.threshold.map(|t| self.d_statistic <= t)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketStat {
    pub count: u64,
    pub mean: f64,
    pub std: f64,
}

/// Number of label shuffles averaged into the permutation noise floor.
const NOISE_FLOOR_PERMUTATIONS: u64 = 4;

/// Plug-in MI between z (discretized into `n_bins_z` equal-mass rank
/// bins) and the discrete bucket key. The noise floor is the mean of the
/// same estimate over seeded permutations of the keys.
pub fn mutual_information_binned(
    z: &[f64],
    keys: &[BiasKey],
    n_bins_z: usize,
    seed: u64,
) -> Result<MiEstimate> {
    if z.len() != keys.len() {
        return Err(Error::Incompatible(format!(
            "{} scores against {} keys",
            z.len(),
            keys.len()
        )));
    }
    if n_bins_z < 2 {
        return Err(Error::InvalidSpec(format!(
            "MI binning needs at least 2 bins, got {n_bins_z}"
        )));
    }
    if z.len() < n_bins_z {
        return Err(Error::EmptyInput(format!(
            "{} samples cannot fill {} bins",
            z.len(),
            n_bins_z
        )));
    }
    if let Some(bad) = z.iter().find(|v| !v.is_finite()) {
        return Err(Error::InvalidValue(format!("non-finite score {bad}")));
    }
    let bins = equal_mass_bins(z, n_bins_z);
    let mut key_ids = BTreeMap::new();
    let mut ids = Vec::with_capacity(keys.len());
    for key in keys {
        let next = key_ids.len();
        ids.push(*key_ids.entry(key.clone()).or_insert(next));
    }
    let n_keys = key_ids.len();

    let nats = plug_in_mi(&bins, &ids, n_bins_z, n_keys);
    let mut floor_sum = 0.0;
    let mut shuffled = ids.clone();
    for round in 0..NOISE_FLOOR_PERMUTATIONS {
        let mut rng = ChaCha12Rng::seed_from_u64(mix_seed(seed, round));
        shuffled.shuffle(&mut rng);
        floor_sum += plug_in_mi(&bins, &shuffled, n_bins_z, n_keys);
    }
    Ok(MiEstimate {
        nats,
        n_bins_z,
        n_samples: z.len(),
        noise_floor_nats: floor_sum / NOISE_FLOOR_PERMUTATIONS as f64,
    })
}

/// Rank-based equal-mass binning: sample at sorted position p lands in
/// bin ⌊p·B/n⌋, so bin occupancies differ by at most one and ties are
/// split deterministically by input position.
fn equal_mass_bins(z: &[f64], n_bins: usize) -> Vec<usize> {
    let n = z.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| z[a].total_cmp(&z[b]).then(a.cmp(&b)));
    let mut bins = vec![0usize; n];
    for (pos, &i) in order.iter().enumerate() {
        bins[i] = pos * n_bins / n;
    }
    bins
}

fn plug_in_mi(bins: &[usize], key_ids: &[usize], n_bins: usize, n_keys: usize) -> f64 {
    let n = bins.len();
    let mut joint = vec![0u64; n_bins * n_keys];
    let mut bin_marginal = vec![0u64; n_bins];
    let mut key_marginal = vec![0u64; n_keys];
    for (&b, &k) in bins.iter().zip(key_ids) {
        joint[b * n_keys + k] += 1;
        bin_marginal[b] += 1;
        key_marginal[k] += 1;
    }
    let n = n as f64;
    let mut nats = 0.0;
    for b in 0..n_bins {
        for k in 0..n_keys {
            let c = joint[b * n_keys + k];
            if c == 0 {
                continue;
            }
            let c = c as f64;
            nats += c / n
                * ((c * n) / (bin_marginal[b] as f64 * key_marginal[k] as f64)).ln();
        }
    }
    // The plug-in estimate is a KL divergence, non-negative up to the
    // rounding of the sum.
    nats.max(0.0)
}

/// Exact KS distance between the sample and Uniform(0, 1):
/// D = maxᵢ max(z₍ᵢ₎ − i/n, (i+1)/n − z₍ᵢ₎).
pub fn ks_uniformity(z: &[f64]) -> Result<KsResult> {
    if z.is_empty() {
        return Err(Error::EmptyInput("KS statistic of an empty sample".into()));
    }
    if let Some(bad) = z.iter().find(|v| !(**v >= 0.0 && **v <= 1.0)) {
        return Err(Error::InvalidValue(format!(
            "KS uniformity sample value {bad} outside [0, 1]"
        )));
    }
    let mut sorted = z.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let mut d = 0.0f64;
    for (i, &v) in sorted.iter().enumerate() {
        d = d.max(v - i as f64 / n).max((i + 1) as f64 / n - v);
    }
    Ok(KsResult {
        d_statistic: d,
        n_samples: sorted.len(),
        threshold: None,
    })
}

/// KS distance between the sample and a target law, computed by mapping
/// each value through the target's CDF and comparing to Uniform(0, 1).
pub fn ks_against_target(z: &[f64], target: &TargetDistribution) -> Result<KsResult> {
    if z.is_empty() {
        return Err(Error::EmptyInput("KS statistic of an empty sample".into()));
    }
    if let Some(bad) = z.iter().find(|v| !v.is_finite()) {
        return Err(Error::InvalidValue(format!("non-finite sample value {bad}")));
    }
    let u: Vec<f64> = z.iter().map(|&v| target.cdf(v)).collect();
    ks_uniformity(&u)
}

/// Spearman rank correlation: Pearson correlation of midranks.
pub fn rank_correlation(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Incompatible(format!(
            "rank correlation over lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 2 {
        return Err(Error::EmptyInput(
            "rank correlation needs at least 2 samples".into(),
        ));
    }
    for v in a.iter().chain(b) {
        if !v.is_finite() {
            return Err(Error::InvalidValue(format!("non-finite sample value {v}")));
        }
    }
    let ra = midranks(a);
    let rb = midranks(b);
    let n = a.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let va = ra.iter().map(|x| (x - ma) * (x - ma)).sum::<f64>() / n;
    let vb = rb.iter().map(|y| (y - mb) * (y - mb)).sum::<f64>() / n;
    if va == 0.0 || vb == 0.0 {
        return Err(Error::Degenerate(
            "rank correlation of a constant sample is undefined".into(),
        ));
    }
    let cov = ra
        .iter()
        .zip(&rb)
        .map(|(x, y)| (x - ma) * (y - mb))
        .sum::<f64>()
        / n;
    Ok((cov / (va * vb).sqrt()).clamp(-1.0, 1.0))
}

/// Average rank per element (1-based); runs of equal values share their
/// midrank.
fn midranks(v: &[f64]) -> Vec<f64> {
    let n = v.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; n];
    let mut start = 0;
    while start < n {
        let mut end = start + 1;
        while end < n && v[order[end]] == v[order[start]] {
            end += 1;
        }
        // Positions start..end (0-based) hold equal values; their 1-based
        // midrank is the average of start+1 ..= end.
        let midrank = (start + 1 + end) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = midrank;
        }
        start = end;
    }
    ranks
}

/// Per-bucket count, mean, and population standard deviation.
pub fn bucket_stats(z: &[f64], keys: &[BiasKey]) -> Result<BTreeMap<BiasKey, BucketStat>> {
    if z.len() != keys.len() {
        return Err(Error::Incompatible(format!(
            "{} scores against {} keys",
            z.len(),
            keys.len()
        )));
    }
    let mut grouped: BTreeMap<BiasKey, Vec<f64>> = BTreeMap::new();
    for (&v, key) in z.iter().zip(keys) {
        grouped.entry(key.clone()).or_default().push(v);
    }
    Ok(grouped
        .into_iter()
        .map(|(key, values)| {
            let (mean, std) = mean_and_std(&values);
            (
                key,
                BucketStat {
                    count: values.len() as u64,
                    mean,
                    std,
                },
            )
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::open01;
    use approx::assert_relative_eq;

    fn key(i: usize) -> BiasKey {
        BiasKey::new(vec![i])
    }

    #[test]
    fn mi_of_a_perfect_binary_copy_is_ln_two() {
        let keys: Vec<BiasKey> = (0..100).map(|i| key(i % 2)).collect();
        let z: Vec<f64> = (0..100).map(|i| (i % 2) as f64).collect();
        let est = mutual_information_binned(&z, &keys, 2, 0).unwrap();
        assert_eq!(est.nats, 2f64.ln());
        assert!(est.noise_floor_nats < 0.05);
        assert_eq!(est.n_samples, 100);
    }

    #[test]
    fn mi_of_a_monotone_four_level_map_is_ln_four() {
        let keys: Vec<BiasKey> = (0..200).map(|i| key(i % 4)).collect();
        let z: Vec<f64> = (0..200).map(|i| 2.5 * (i % 4) as f64 + 1.0).collect();
        let est = mutual_information_binned(&z, &keys, 4, 0).unwrap();
        assert_relative_eq!(est.nats, 4f64.ln(), epsilon = 1e-13);
    }

    #[test]
    fn mi_of_independent_draws_sits_at_the_noise_floor() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let n = 4000;
        let z: Vec<f64> = (0..n).map(|_| open01(&mut rng)).collect();
        let keys: Vec<BiasKey> = (0..n)
            .map(|_| key((open01(&mut rng) * 4.0) as usize))
            .collect();
        let est = mutual_information_binned(&z, &keys, 10, 0).unwrap();
        assert!(est.nats >= 0.0);
        assert!(est.noise_floor_nats > 0.0);
        assert!(
            est.nats <= 2.0 * est.noise_floor_nats,
            "nats {} floor {}",
            est.nats,
            est.noise_floor_nats
        );
        // Both vanish as n grows; at this size they are already tiny.
        assert!(est.nats < 0.02);
    }

    #[test]
    fn mi_rejects_bad_shapes() {
        let z = vec![0.1, 0.2, 0.3];
        let keys = vec![key(0), key(1)];
        assert!(matches!(
            mutual_information_binned(&z, &keys, 2, 0),
            Err(Error::Incompatible(_))
        ));
        let keys3 = vec![key(0), key(1), key(0)];
        assert!(matches!(
            mutual_information_binned(&z, &keys3, 1, 0),
            Err(Error::InvalidSpec(_))
        ));
        assert!(matches!(
            mutual_information_binned(&z, &keys3, 5, 0),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    fn ks_of_the_hazen_grid_is_half_over_n() {
        // Power-of-two sizes keep every level dyadic, so D is bitwise
        // 0.5/n; other sizes agree to rounding.
        for n in [4usize, 64, 512] {
            let z: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect();
            let ks = ks_uniformity(&z).unwrap();
            assert_eq!(ks.d_statistic, 0.5 / n as f64);
        }
        for n in [100usize, 999] {
            let z: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect();
            let ks = ks_uniformity(&z).unwrap();
            assert_relative_eq!(ks.d_statistic, 0.5 / n as f64, epsilon = 1e-12);
        }
    }

    #[test]
    fn ks_of_point_masses() {
        let ks = ks_uniformity(&[0.5; 40]).unwrap();
        assert_eq!(ks.d_statistic, 0.5);
        let ks = ks_uniformity(&[0.0, 1.0]).unwrap();
        assert_eq!(ks.d_statistic, 0.5);
    }

    #[test]
    fn ks_rejects_bad_input() {
        assert!(matches!(ks_uniformity(&[]), Err(Error::EmptyInput(_))));
        assert!(matches!(
            ks_uniformity(&[0.5, 1.5]),
            Err(Error::InvalidValue(_))
        ));
        assert!(matches!(
            ks_uniformity(&[f64::NAN]),
            Err(Error::InvalidValue(_))
        ));
    }

    #[test]
    fn ks_against_gaussian_target_matches_the_uniform_case() {
        let n = 500;
        let target = TargetDistribution::Gaussian {
            location: 2.0,
            scale: 3.0,
        };
        let z: Vec<f64> = (0..n)
            .map(|i| {
                let u = (i as f64 + 0.5) / n as f64;
                2.0 + 3.0 * crate::numeric::normal_quantile(u)
            })
            .collect();
        let ks = ks_against_target(&z, &target).unwrap();
        assert_relative_eq!(ks.d_statistic, 0.5 / n as f64, epsilon = 1e-12);
    }

    #[test]
    fn uniform_target_reduces_to_plain_uniformity() {
        let z = vec![0.12, 0.5, 0.77, 0.93, 0.31];
        let a = ks_against_target(&z, &TargetDistribution::Uniform01).unwrap();
        let b = ks_uniformity(&z).unwrap();
        assert_eq!(a.d_statistic, b.d_statistic);
    }

    #[test]
    fn mismatched_target_is_flagged_loudly() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let z: Vec<f64> = (0..10_000).map(|_| open01(&mut rng)).collect();
        let target = TargetDistribution::Gaussian {
            location: 0.0,
            scale: 1.0,
        };
        let ks = ks_against_target(&z, &target).unwrap();
        assert!(ks.d_statistic > 0.05);
    }

    #[test]
    fn ks_is_invariant_under_a_shared_monotone_map() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let z: Vec<f64> = (0..200).map(|_| open01(&mut rng) * 4.0).collect();
        let grid = vec![0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 4.0];
        let before = ks_against_target(
            &z,
            &TargetDistribution::Empirical { grid: grid.clone() },
        )
        .unwrap();
        // 2x + 1 applied to both the sample and the reference grid leaves
        // every comparison count unchanged.
        let z2: Vec<f64> = z.iter().map(|v| 2.0 * v + 1.0).collect();
        let grid2: Vec<f64> = grid.iter().map(|v| 2.0 * v + 1.0).collect();
        let after = ks_against_target(&z2, &TargetDistribution::Empirical { grid: grid2 }).unwrap();
        assert_eq!(before.d_statistic, after.d_statistic);
    }

    #[test]
    fn spearman_matches_hand_computations() {
        assert_eq!(
            rank_correlation(&[1.0, 2.0, 3.0, 4.0], &[1.0, 2.0, 3.0, 4.0]).unwrap(),
            1.0
        );
        assert_eq!(
            rank_correlation(&[1.0, 2.0, 3.0, 4.0], &[-1.0, -2.0, -3.0, -4.0]).unwrap(),
            -1.0
        );
        assert_eq!(
            rank_correlation(&[1.0, 2.0, 3.0, 4.0], &[1.0, 2.0, 4.0, 3.0]).unwrap(),
            0.8
        );
        // Midranks under ties: a = (1.5, 1.5, 3) against b = (1, 2, 3).
        assert_relative_eq!(
            rank_correlation(&[1.0, 1.0, 2.0], &[3.0, 4.0, 10.0]).unwrap(),
            0.75f64.sqrt(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn spearman_is_invariant_under_monotone_transforms() {
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let a: Vec<f64> = (0..150).map(|_| open01(&mut rng) * 6.0 - 3.0).collect();
        let b: Vec<f64> = (0..150).map(|_| open01(&mut rng)).collect();
        let rho = rank_correlation(&a, &b).unwrap();
        let a_exp: Vec<f64> = a.iter().map(|v| v.exp()).collect();
        assert_eq!(rank_correlation(&a_exp, &b).unwrap(), rho);
    }

    #[test]
    fn spearman_rejects_degenerate_and_misshapen_input() {
        assert!(matches!(
            rank_correlation(&[1.0, 1.0], &[1.0, 2.0]),
            Err(Error::Degenerate(_))
        ));
        assert!(matches!(
            rank_correlation(&[1.0], &[1.0]),
            Err(Error::EmptyInput(_))
        ));
        assert!(matches!(
            rank_correlation(&[1.0, 2.0], &[1.0]),
            Err(Error::Incompatible(_))
        ));
    }

    #[test]
    fn bucket_stats_aggregate_exactly() {
        let z = vec![1.0, 2.0, 3.0, 10.0, 14.0];
        let keys = vec![key(0), key(0), key(0), key(1), key(1)];
        let stats = bucket_stats(&z, &keys).unwrap();
        assert_eq!(stats.len(), 2);
        assert_eq!(stats[&key(0)].mean, 2.0);
        assert_eq!(stats[&key(0)].std, (2.0f64 / 3.0).sqrt());
        assert_eq!(stats[&key(1)].count, 2);
        assert_eq!(stats[&key(1)].mean, 12.0);
        assert!(bucket_stats(&[], &[]).unwrap().is_empty());
    }

    #[test]
    fn pooled_rank_correlation_is_diluted_by_bucket_offsets() {
        use crate::bias::{BiasDimension, BiasSpec, DimensionKind};
        use crate::simulate::{generate, SignalLaw, SignalSim, SimConfig};
        let spec = BiasSpec::new(vec![BiasDimension {
            name: "surface".into(),
            kind: DimensionKind::Categorical { cardinality: 2 },
        }])
        .unwrap();
        let config = SimConfig {
            n_records: 3000,
            seed: 4,
            spec,
            bucket_probabilities: vec![vec![0.5, 0.5]],
            signals: vec![SignalSim {
                name: "watch".into(),
                law: SignalLaw::Lognormal {
                    base_location: 0.0,
                    location_offsets: vec![vec![-0.75, 0.75]],
                    base_scale: 0.5,
                    scale_offsets: vec![],
                    noise_scale: 0.0,
                },
            }],
        };
        let records = generate(&config).unwrap();
        let mut pooled_x = Vec::new();
        let mut pooled_z = Vec::new();
        let mut within = Vec::new();
        for bucket in 0..2 {
            let xs: Vec<f64> = records
                .iter()
                .filter(|r| r.key.indices()[0] == bucket)
                .map(|r| r.x_latent["watch"])
                .collect();
            let zs: Vec<f64> = records
                .iter()
                .filter(|r| r.key.indices()[0] == bucket)
                .map(|r| r.z_true)
                .collect();
            within.push(rank_correlation(&xs, &zs).unwrap());
            pooled_x.extend(xs);
            pooled_z.extend(zs);
        }
        // Within a bucket x is a strictly increasing function of z.
        for rho in &within {
            assert!(*rho > 1.0 - 1e-12);
        }
        let pooled = rank_correlation(&pooled_x, &pooled_z).unwrap();
        let min_within = within.iter().copied().fold(f64::INFINITY, f64::min);
        assert!(
            pooled < min_within - 0.05,
            "pooled {pooled} vs within {min_within}"
        );
    }
}
