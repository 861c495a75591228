//! End-to-end acceptance checks on the default synthetic scenario:
//! two bias dimensions (4 x 5 buckets), one lognormal and one binary
//! signal, 200,000 records, bucket locations spanning well over 1.5
//! scale units. Each test prints one `PASS`/`FAIL` line for its
//! criterion; run with `--nocapture` to see all eight.

use std::collections::BTreeMap;
use std::sync::LazyLock;
use std::time::Instant;

use pxalign::align::{
    mean_align, quantile_map, to_target, FusionWeights, ScoreMethod, SignalAlignment,
    TargetDistribution, TieMode,
};
use pxalign::behavior::{FeatureVector, PredictorModel};
use pxalign::bias::{BiasDimension, BiasKey, BiasSpec, DimensionKind};
use pxalign::conddist::{ConditionalModel, FitOptions, TransformSpace};
use pxalign::config::{
    AlignmentConfig, BiasDimConfig, ConddistConfig, ConfigTieMode, EvaluationConfig,
    ExperimentConfig, OutputConfig, PredictorConfig, SimulatorConfig,
};
use pxalign::metrics::{bucket_stats, ks_against_target, mutual_information_binned,
    rank_correlation};
use pxalign::numeric::{mean_and_std, mix_seed, normal_quantile, open01};
use pxalign::pipeline::{run_evaluate, run_fit, run_pipeline, run_simulate, run_transform};
use pxalign::quantreg::{QuantileRegConfig, QuantileRegModel};
use pxalign::report::ExperimentReport;
use pxalign::simulate::{SignalLaw, SignalSim};
use pxalign::summary::EmpiricalSummary;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// Chi-square critical value for 10 bins (9 degrees of freedom) at
/// significance 0.01.
const CHI_SQUARE_CRIT_10_BINS_1PCT: f64 = 21.665994333461924;

/// Raw-signal dependence magnitudes observed on this exact scenario and
/// seed; pinned so a silently weakened scenario cannot pass criterion 2
/// by making the "before" side easy.
const PINNED_RAW_MI_WATCH_NATS: f64 = 0.1856;
const PINNED_RAW_MI_CLICK_NATS: f64 = 0.1344;

/// Observed Spearman gain of aligned over raw scores on this scenario
/// (0.191), rounded down; criterion 3 requires at least this much
/// improvement.
const PINNED_SPEARMAN_MARGIN: f64 = 0.18;

fn scenario_config(n_records: u64) -> ExperimentConfig {
    let config = ExperimentConfig {
        master_seed: 20,
        bias: vec![
            BiasDimConfig {
                name: "device".into(),
                kind: DimensionKind::Categorical { cardinality: 4 },
                probabilities: vec![0.4, 0.3, 0.2, 0.1],
            },
            BiasDimConfig {
                name: "duration".into(),
                kind: DimensionKind::Continuous {
                    boundaries: vec![15.0, 45.0, 90.0, 180.0],
                },
                probabilities: vec![0.3, 0.25, 0.2, 0.15, 0.1],
            },
        ],
        simulator: SimulatorConfig {
            n_records,
            signals: vec![
                SignalSim {
                    name: "watch".into(),
                    law: SignalLaw::Lognormal {
                        base_location: 1.0,
                        location_offsets: vec![
                            vec![-0.9, -0.3, 0.3, 0.9],
                            vec![-0.5, -0.25, 0.0, 0.25, 0.5],
                        ],
                        base_scale: 1.0,
                        scale_offsets: vec![],
                        noise_scale: 0.1,
                    },
                },
                SignalSim {
                    name: "click".into(),
                    law: SignalLaw::Binary {
                        base_intercept: -0.2,
                        intercept_offsets: vec![
                            vec![-0.8, -0.3, 0.2, 0.7],
                            vec![-0.4, -0.2, 0.0, 0.2, 0.4],
                        ],
                        slope: 1.0,
                    },
                },
            ],
        },
        predictor: BTreeMap::from([
            ("watch".to_string(), PredictorConfig::Oracle),
            ("click".to_string(), PredictorConfig::Oracle),
        ]),
        conddist: ConddistConfig {
            grid_size: 1024,
            shrinkage_strength: 0.0,
            ..ConddistConfig::default()
        },
        alignment: AlignmentConfig {
            tie_mode: ConfigTieMode::Deterministic,
            signals: BTreeMap::from([
                (
                    "watch".to_string(),
                    SignalAlignment {
                        method: ScoreMethod::Quantile,
                        target: None,
                    },
                ),
                (
                    "click".to_string(),
                    SignalAlignment {
                        method: ScoreMethod::Quantile,
                        target: None,
                    },
                ),
            ]),
        },
        fusion: FusionWeights::new(BTreeMap::from([
            ("watch".to_string(), 0.6),
            ("click".to_string(), 0.4),
        ]))
        .unwrap(),
        evaluation: EvaluationConfig {
            mi_bins: 10,
            ks_bucket_threshold: 0.02,
            ks_global_threshold: 0.005,
            min_bucket_evaluation_count: 1000,
        },
        output: OutputConfig::default(),
    };
    config.validate().unwrap();
    config
}

struct Scenario {
    report: ExperimentReport,
    model_watch: ConditionalModel,
    keys: Vec<BiasKey>,
    z_true: Vec<f64>,
    x_watch: Vec<f64>,
    x_click: Vec<f64>,
    z_watch: Vec<f64>,
    fit_transform_seconds: f64,
}

static SCENARIO: LazyLock<Scenario> = LazyLock::new(|| {
    let config = scenario_config(200_000);
    let data = run_simulate(&config, config.master_seed).unwrap();
    let started = Instant::now();
    let (artifacts, _) = run_fit(&config, config.master_seed, &data).unwrap();
    let transformed = run_transform(&config, config.master_seed, &data, &artifacts).unwrap();
    let fit_transform_seconds = started.elapsed().as_secs_f64();
    let mut fingerprints = BTreeMap::new();
    for (signal, artifact) in &artifacts {
        fingerprints.insert(signal.clone(), artifact.fingerprint().unwrap());
    }
    let report = run_evaluate(&config, config.master_seed, &transformed, fingerprints).unwrap();
    let spec = config.bias_spec().unwrap();
    let keys: Vec<BiasKey> = transformed
        .rows()
        .iter()
        .map(|row| {
            spec.discretize(&[row.bias["device"], row.bias["duration"]])
                .unwrap()
        })
        .collect();
    Scenario {
        report,
        model_watch: artifacts["watch"].model.clone(),
        keys,
        z_true: transformed.rows().iter().map(|r| r.z_true.unwrap()).collect(),
        x_watch: transformed.rows().iter().map(|r| r.predicted["watch"]).collect(),
        x_click: transformed.rows().iter().map(|r| r.predicted["click"]).collect(),
        z_watch: transformed.rows().iter().map(|r| r.scores["watch"]).collect(),
        fit_transform_seconds,
    }
});

macro_rules! check {
    ($failures:expr, $cond:expr, $($msg:tt)+) => {
        if !$cond {
            $failures.push(format!($($msg)+));
        }
    };
}

fn conclude(number: usize, label: &str, failures: Vec<String>) {
    let verdict = if failures.is_empty() { "PASS" } else { "FAIL" };
    println!("acceptance criterion {number} ({label}): {verdict}");
    assert!(
        failures.is_empty(),
        "criterion {number} ({label}):\n  {}",
        failures.join("\n  ")
    );
}

#[test]
fn criterion_1_training_pit_is_uniform_per_bucket_and_globally() {
    let s = &*SCENARIO;
    let mut failures = Vec::new();
    for signal in ["watch", "click"] {
        let r = &s.report.signals[signal];
        let global = r.global_ks.as_ref().unwrap();
        check!(
            failures,
            global.d_statistic <= 0.005,
            "{signal}: global KS {} > 0.005",
            global.d_statistic
        );
        let buckets = r.per_bucket_ks.as_ref().unwrap();
        check!(
            failures,
            buckets.len() == 20,
            "{signal}: expected all 20 buckets above the n >= 1000 cutoff, got {}",
            buckets.len()
        );
        for (label, ks) in buckets {
            check!(
                failures,
                ks.d_statistic <= 0.02,
                "{signal}: bucket {label} KS {} > 0.02",
                ks.d_statistic
            );
        }
    }
    check!(
        failures,
        s.fit_transform_seconds <= 60.0,
        "fit + transform took {:.1}s > 60s",
        s.fit_transform_seconds
    );
    conclude(1, "training PIT uniform per bucket and globally", failures);
}

#[test]
fn criterion_2_aligned_scores_carry_no_bucket_information() {
    let s = &*SCENARIO;
    let mut failures = Vec::new();
    let raw_watch = mutual_information_binned(&s.x_watch, &s.keys, 10, 0xA2).unwrap();
    let raw_click = mutual_information_binned(&s.x_click, &s.keys, 10, 0xA3).unwrap();
    println!(
        "observed raw MI: watch {} nats (floor {}), click {} nats (floor {})",
        raw_watch.nats, raw_watch.noise_floor_nats, raw_click.nats, raw_click.noise_floor_nats
    );
    for (signal, raw, pinned) in [
        ("watch", &raw_watch, PINNED_RAW_MI_WATCH_NATS),
        ("click", &raw_click, PINNED_RAW_MI_CLICK_NATS),
    ] {
        check!(
            failures,
            raw.nats > 10.0 * raw.noise_floor_nats,
            "{signal}: raw MI {} not above 10x noise floor {}",
            raw.nats,
            raw.noise_floor_nats
        );
        check!(
            failures,
            (raw.nats - pinned).abs() <= 0.05 * pinned,
            "{signal}: raw MI {} drifted from the pinned oracle value {}",
            raw.nats,
            pinned
        );
        let aligned = &s.report.signals[signal].mi_aligned;
        check!(
            failures,
            aligned.nats <= 2.0 * aligned.noise_floor_nats,
            "{signal}: aligned MI {} above 2x noise floor {}",
            aligned.nats,
            aligned.noise_floor_nats
        );
    }
    let fused = &s.report.fused.mi;
    check!(
        failures,
        fused.nats <= 2.0 * fused.noise_floor_nats,
        "fused MI {} above 2x noise floor {}",
        fused.nats,
        fused.noise_floor_nats
    );
    conclude(2, "aligned scores carry no bucket information", failures);
}

#[test]
fn criterion_3_alignment_recovers_latent_interest_ranking() {
    let s = &*SCENARIO;
    let mut failures = Vec::new();
    let raw = rank_correlation(&s.x_watch, &s.z_true).unwrap();
    let aligned = rank_correlation(&s.z_watch, &s.z_true).unwrap();
    println!(
        "observed Spearman: raw {raw}, aligned {aligned}, margin {}",
        aligned - raw
    );
    check!(
        failures,
        aligned >= 0.98,
        "aligned Spearman {aligned} below 0.98"
    );
    check!(
        failures,
        aligned - raw >= PINNED_SPEARMAN_MARGIN,
        "margin {} below the pinned oracle margin {PINNED_SPEARMAN_MARGIN}",
        aligned - raw
    );
    conclude(3, "alignment recovers latent interest ranking", failures);
}

#[test]
fn criterion_4_mean_alignment_centers_every_bucket() {
    let s = &*SCENARIO;
    let mut failures = Vec::new();
    let aligned: Vec<f64> = s
        .x_watch
        .iter()
        .zip(&s.keys)
        .map(|(&x, key)| mean_align(&s.model_watch, key, x).unwrap())
        .collect();
    let (_, global_std) = mean_and_std(&aligned);
    let stats = bucket_stats(&aligned, &s.keys).unwrap();
    check!(failures, stats.len() == 20, "expected 20 buckets, got {}", stats.len());
    for (key, stat) in &stats {
        check!(
            failures,
            stat.mean.abs() <= 0.01 * global_std,
            "bucket {} mean {} exceeds 0.01 x global std {global_std}",
            key.label(),
            stat.mean
        );
    }
    conclude(4, "mean alignment centers every bucket", failures);
}

#[test]
fn criterion_5_gaussian_reshaping_keeps_independence_and_ranks() {
    let s = &*SCENARIO;
    let mut failures = Vec::new();
    let n = 100_000;
    let target = TargetDistribution::Gaussian {
        location: 0.0,
        scale: 1.0,
    };
    let z = &s.z_watch[..n];
    let keys = &s.keys[..n];
    let reshaped: Vec<f64> = z.iter().map(|&v| to_target(v, &target).unwrap()).collect();
    let ks = ks_against_target(&reshaped, &target).unwrap();
    check!(
        failures,
        ks.d_statistic <= 0.01,
        "KS against the gaussian target {} > 0.01",
        ks.d_statistic
    );
    let mi = mutual_information_binned(&reshaped, keys, 10, 0xA5).unwrap();
    check!(
        failures,
        mi.nats <= 2.0 * mi.noise_floor_nats,
        "reshaped MI {} above 2x noise floor {}",
        mi.nats,
        mi.noise_floor_nats
    );
    let mut sorted: Vec<u64> = z.iter().map(|v| v.to_bits()).collect();
    sorted.sort_unstable();
    sorted.dedup();
    check!(
        failures,
        sorted.len() == n,
        "sample is not tie-free: {} distinct of {n}",
        sorted.len()
    );
    let rho = rank_correlation(&reshaped, z).unwrap();
    check!(failures, rho == 1.0, "Spearman(z', z) = {rho}, expected exactly 1");
    conclude(5, "gaussian reshaping keeps independence and ranks", failures);
}

#[test]
fn criterion_6_randomized_ties_pass_uniformity_where_deterministic_fails() {
    let mut failures = Vec::new();
    let n = 100_000usize;
    let spec = BiasSpec::new(vec![BiasDimension {
        name: "only".into(),
        kind: DimensionKind::Categorical { cardinality: 1 },
    }])
    .unwrap();
    let key = BiasKey::new(vec![0]);
    let values: Vec<f64> = (0..n).map(|i| f64::from(i >= 3 * n / 10)).collect();
    let records: Vec<(f64, BiasKey)> = values.iter().map(|&v| (v, key.clone())).collect();
    let options = FitOptions {
        grid_size: 1024,
        min_bucket_count: 1,
        shrinkage_strength: 0.0,
        transform: TransformSpace::Identity,
    };
    let model = ConditionalModel::fit_empirical(records, spec, "atoms", options).unwrap();

    let chi_square = |zs: &[f64]| {
        let mut counts = [0u64; 10];
        for &z in zs {
            counts[((z * 10.0) as usize).min(9)] += 1;
        }
        let expected = zs.len() as f64 / 10.0;
        counts
            .iter()
            .map(|&c| {
                let d = c as f64 - expected;
                d * d / expected
            })
            .sum::<f64>()
    };

    let randomized: Vec<f64> = values
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            quantile_map(
                &model,
                &key,
                x,
                TieMode::Randomized {
                    seed: mix_seed(0xC6, i as u64),
                },
            )
            .unwrap()
        })
        .collect();
    let deterministic: Vec<f64> = values
        .iter()
        .map(|&x| quantile_map(&model, &key, x, TieMode::Deterministic).unwrap())
        .collect();
    let stat_rand = chi_square(&randomized);
    let stat_det = chi_square(&deterministic);
    println!("observed chi-square: randomized {stat_rand}, deterministic {stat_det}");
    check!(
        failures,
        stat_rand < CHI_SQUARE_CRIT_10_BINS_1PCT,
        "randomized ties fail uniformity: chi-square {stat_rand} >= {CHI_SQUARE_CRIT_10_BINS_1PCT}"
    );
    check!(
        failures,
        stat_det > CHI_SQUARE_CRIT_10_BINS_1PCT,
        "deterministic ties unexpectedly pass: chi-square {stat_det}"
    );
    conclude(
        6,
        "randomized ties pass uniformity where deterministic fails",
        failures,
    );
}

#[test]
fn criterion_7_quantile_regression_recovers_analytic_lines() {
    let mut failures = Vec::new();
    // Linear-Gaussian synthetic over one continuous dimension: bucket k
    // has midpoint feature f_k = 0.5 + k and law y = 2 + 3 f_k + 0.4 e,
    // e standard normal, so the analytic tau-quantile line is
    // 2 + 3 f_k + 0.4 qnorm(tau).
    let spec = BiasSpec::new(vec![BiasDimension {
        name: "f".into(),
        kind: DimensionKind::Continuous {
            boundaries: vec![1.0, 2.0, 3.0],
        },
    }])
    .unwrap();
    let sigma = 0.4;
    let taus = [0.1, 0.5, 0.9];
    let per_bucket = 3000usize;
    let mut rng = ChaCha12Rng::seed_from_u64(71);
    let mut records = Vec::new();
    for bucket in 0..4usize {
        let f = 0.5 + bucket as f64;
        for _ in 0..per_bucket {
            let y = 2.0 + 3.0 * f + sigma * normal_quantile(open01(&mut rng));
            records.push((y, BiasKey::new(vec![bucket])));
        }
    }
    let model =
        QuantileRegModel::fit(&records, spec, &taus, &QuantileRegConfig::default()).unwrap();
    for bucket in 0..4usize {
        let key = BiasKey::new(vec![bucket]);
        let f = 0.5 + bucket as f64;
        let predicted = model.predict_quantiles(&key).unwrap();
        for (level, pred) in taus.iter().zip(&predicted) {
            let analytic = 2.0 + 3.0 * f + sigma * normal_quantile(*level);
            check!(
                failures,
                (pred - analytic).abs() <= 0.05,
                "bucket {bucket} tau {level}: predicted {pred} vs analytic {analytic}"
            );
        }
    }
    for (t, level) in taus.iter().enumerate() {
        let mut below = 0usize;
        for bucket in 0..4usize {
            let key = BiasKey::new(vec![bucket]);
            let pred = model.predict_quantiles(&key).unwrap()[t];
            below += records
                .iter()
                .filter(|(y, k)| k.indices()[0] == bucket && *y < pred)
                .count();
            let _ = key;
        }
        let coverage = below as f64 / records.len() as f64;
        check!(
            failures,
            (coverage - level).abs() <= 0.02,
            "tau {level}: coverage {coverage} off by more than 0.02"
        );
    }
    conclude(7, "quantile regression recovers analytic lines", failures);
}

/// Builds a predictor with chosen parameters through its serialized
/// form, the one public construction path besides training.
fn model_with(signal: &str, link: &str, weights: &[f64], intercept: f64) -> PredictorModel {
    serde_json::from_value(serde_json::json!({
        "signal": signal, "link": link, "weights": weights, "intercept": intercept
    }))
    .unwrap()
}

#[test]
fn criterion_8_numerical_core_is_exact_and_reproducible() {
    let s = &*SCENARIO;
    let mut failures = Vec::new();

    // Gradient check: the analytic gradients of the two training losses
    // against central finite differences of the loss evaluated through
    // `predict`, at relative error 1e-4.
    let features: Vec<Vec<f64>> = (0..8)
        .map(|i| {
            (0..3)
                .map(|j| ((3 * i + 5 * j + 1) as f64 * 0.37).sin())
                .collect()
        })
        .collect();
    let targets_reg: Vec<f64> = (0..8).map(|i| ((i as f64) * 0.81).cos() * 2.0).collect();
    let targets_cls: Vec<f64> = (0..8).map(|i| f64::from(i % 3 == 0)).collect();
    let weights = [0.4, -0.7, 0.2];
    let intercept = 0.3;
    for (link, targets) in [("identity", &targets_reg), ("logistic", &targets_cls)] {
        let loss = |w: &[f64], b: f64| -> f64 {
            let m = model_with("sig", link, w, b);
            features
                .iter()
                .zip(targets)
                .map(|(f, &y)| {
                    let p = m.predict(&FeatureVector::new(f.clone()).unwrap()).unwrap();
                    match link {
                        "identity" => 0.5 * (p - y) * (p - y),
                        _ => -(y * p.ln() + (1.0 - y) * (1.0 - p).ln()),
                    }
                })
                .sum::<f64>()
                / features.len() as f64
        };
        let m = model_with("sig", link, &weights, intercept);
        let mut grad = vec![0.0; 4];
        for (f, &y) in features.iter().zip(targets) {
            let p = m.predict(&FeatureVector::new(f.clone()).unwrap()).unwrap();
            let g = (p - y) / features.len() as f64;
            for j in 0..3 {
                grad[j] += g * f[j];
            }
            grad[3] += g;
        }
        let h = 1e-6;
        for j in 0..4 {
            let mut wp = weights.to_vec();
            let mut wm = weights.to_vec();
            let (bp, bm) = if j == 3 {
                (intercept + h, intercept - h)
            } else {
                wp[j] += h;
                wm[j] -= h;
                (intercept, intercept)
            };
            let numeric = (loss(&wp, bp) - loss(&wm, bm)) / (2.0 * h);
            let denom = grad[j].abs().max(1e-8);
            check!(
                failures,
                (numeric - grad[j]).abs() / denom <= 1e-4,
                "{link} gradient coordinate {j}: numeric {numeric} vs analytic {}",
                grad[j]
            );
        }
    }

    // cdf/inv_cdf round trip within one grid cell on scenario data.
    let grid_size = 1024usize;
    let summary = EmpiricalSummary::fit(&s.x_watch, grid_size).unwrap();
    for j in 1..100 {
        let tau = j as f64 / 100.0;
        let back = summary.cdf(summary.inv_cdf(tau));
        check!(
            failures,
            (back - tau).abs() <= 1.0 / grid_size as f64,
            "round trip at tau {tau}: {back}"
        );
    }

    // Merged halves agree with the pooled fit within one grid cell.
    let half = s.x_watch.len() / 2;
    let merged = EmpiricalSummary::fit(&s.x_watch[..half], grid_size)
        .unwrap()
        .merge(&EmpiricalSummary::fit(&s.x_watch[half..], grid_size).unwrap())
        .unwrap();
    for j in 1..100 {
        let x = summary.inv_cdf(j as f64 / 100.0);
        check!(
            failures,
            (merged.cdf(x) - summary.cdf(x)).abs() <= 1.0 / grid_size as f64,
            "merge drift at x {x}: merged {} vs pooled {}",
            merged.cdf(x),
            summary.cdf(x)
        );
    }

    // Artifacts survive save/load bit-exactly.
    let dir = tempfile::tempdir().unwrap();
    let config = scenario_config(10_000);
    let run = run_pipeline(&config, config.master_seed).unwrap();
    for (signal, artifact) in &run.artifacts {
        let path = dir.path().join(format!("{signal}.json"));
        artifact.save(&path).unwrap();
        let loaded = pxalign::artifact::ModelArtifact::load(&path).unwrap();
        check!(
            failures,
            loaded.to_json().unwrap() == artifact.to_json().unwrap(),
            "artifact for {signal} changed across save/load"
        );
        check!(
            failures,
            loaded.fingerprint().unwrap() == artifact.fingerprint().unwrap(),
            "artifact fingerprint for {signal} changed across save/load"
        );
    }

    // The full pipeline is byte-reproducible under a fixed seed and
    // diverges under a different one.
    let again = run_pipeline(&config, config.master_seed).unwrap();
    check!(
        failures,
        run.data.to_csv_string().unwrap() == again.data.to_csv_string().unwrap(),
        "simulated table differs between identical runs"
    );
    check!(
        failures,
        run.transformed.to_csv_string().unwrap() == again.transformed.to_csv_string().unwrap(),
        "transformed table differs between identical runs"
    );
    check!(
        failures,
        run.report.to_json().unwrap() == again.report.to_json().unwrap(),
        "report differs between identical runs"
    );
    let other = run_pipeline(&config, 21).unwrap();
    check!(
        failures,
        run.data.to_csv_string().unwrap() != other.data.to_csv_string().unwrap(),
        "different master seeds produced identical data"
    );
    conclude(8, "numerical core is exact and reproducible", failures);
}
