//! Stage orchestration: simulate, fit, transform, evaluate.
//!
//! Each stage is a pure function of an [`ExperimentConfig`], an
//! effective master seed, and in-memory tables; file handling lives in
//! the command-line layer. Stage seeds derive from the master seed
//! through fixed stream labels, and per-record randomness derives from
//! the stage seed and the record id, so the pair (config, master seed)
//! determines every output byte regardless of batching or sharding.
//!
//! The fitting stage mirrors the two-step training procedure: first
//! obtain per-record predictions (a trained linear model on encoded bias
//! readings, or an oracle column carried by the table), then estimate
//! the conditional distribution of those predictions given the bias
//! bucket. The transform stage must therefore source predictions the
//! same way fitting did; it recomputes trained predictions from the
//! stored predictor and requires an `x:` column for oracle signals.

use std::collections::BTreeMap;

use crate::align::{score_pipeline, TargetDistribution, TieMode};
use crate::artifact::ModelArtifact;
use crate::behavior::{train_classifier, train_regressor, FeatureVector, LinkKind, PredictorModel};
use crate::bias::{BiasFeatureEncoder, BiasKey, BiasSpec};
use crate::conddist::ConditionalModel;
use crate::config::{ConfigEstimator, ConfigTieMode, ExperimentConfig, PredictorConfig};
use crate::data::{DataRow, DataTable, TableSchema};
use crate::error::{Error, Result};
use crate::metrics;
use crate::numeric::mix_seed;
use crate::quantreg::fit_quantile_model;
use crate::report::{ExperimentReport, FusedReport, SignalReport, REPORT_FORMAT_VERSION};
use crate::simulate::generate;

/// Stream labels separating the stage seeds derived from one master seed.
const STREAM_SIMULATE: u64 = 1;
const STREAM_TRAIN: u64 = 2;
const STREAM_TRANSFORM: u64 = 3;
const STREAM_EVALUATE: u64 = 4;

/// Per-signal fitting log: bucket occupancy and anything a user should
/// know before trusting the fit.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalFitSummary {
    /// False when the predictor came from an oracle column.
    pub trained: bool,
    /// Training-data count per bucket label.
    pub bucket_counts: BTreeMap<String, u64>,
    /// Labels of buckets below the configured min_bucket_count, which
    /// lean on the pooled fallback.
    pub sparse_buckets: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FitSummary {
    pub per_signal: BTreeMap<String, SignalFitSummary>,
}

/// Everything one full run produces.
#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub data: DataTable,
    pub artifacts: BTreeMap<String, ModelArtifact>,
    pub fit_summary: FitSummary,
    pub transformed: DataTable,
    pub report: ExperimentReport,
}

/// Draws the synthetic dataset. The emitted table carries the latent
/// interest (`z_true`), raw bias readings, observed behaviors (`s:`),
/// and the latent behavior values as oracle predictions (`x:`).
pub fn run_simulate(config: &ExperimentConfig, master_seed: u64) -> Result<DataTable> {
    let sim = config.sim_config(mix_seed(master_seed, STREAM_SIMULATE))?;
    let records = generate(&sim)?;
    let dim_names: Vec<String> = sim
        .spec
        .dimensions()
        .iter()
        .map(|d| d.name.clone())
        .collect();
    let signal_names = config.signal_names();
    let schema = TableSchema {
        has_z_true: true,
        bias_dims: dim_names.clone(),
        observed_signals: signal_names.clone(),
        predicted_signals: signal_names,
        score_signals: vec![],
        has_z_final: false,
    };
    let mut table = DataTable::new(schema)?;
    for r in records {
        table.push(DataRow {
            record_id: r.record_id,
            z_true: Some(r.z_true),
            bias: dim_names
                .iter()
                .cloned()
                .zip(r.bias_values.iter().copied())
                .collect(),
            observed: r.s_observed,
            predicted: r.x_latent,
            scores: BTreeMap::new(),
            z_final: None,
        })?;
    }
    Ok(table)
}

/// Bias keys for every row, in table order.
fn discretized_keys(table: &DataTable, spec: &BiasSpec) -> Result<Vec<BiasKey>> {
    let mut schema_dims: Vec<&String> = table.schema().bias_dims.iter().collect();
    schema_dims.sort();
    let mut spec_dims: Vec<&String> = spec.dimensions().iter().map(|d| &d.name).collect();
    spec_dims.sort();
    if schema_dims != spec_dims {
        return Err(Error::Data(format!(
            "table bias columns {schema_dims:?} do not match the configured dimensions \
             {spec_dims:?}"
        )));
    }
    table
        .rows()
        .iter()
        .map(|row| {
            let readings: Vec<f64> = spec
                .dimensions()
                .iter()
                .map(|d| row.bias[&d.name])
                .collect();
            spec.discretize(&readings)
        })
        .collect()
}

fn require_signal_columns(table: &DataTable, signals: &[String]) -> Result<()> {
    for signal in signals {
        if !table.schema().observed_signals.contains(signal) {
            return Err(Error::Data(format!(
                "table has no observed column 's:{signal}' for a configured signal"
            )));
        }
    }
    Ok(())
}

/// Per-record predictions for one signal, sourced the way the
/// configuration demands.
fn signal_predictions(
    table: &DataTable,
    keys: &[BiasKey],
    encoder: &BiasFeatureEncoder,
    signal: &str,
    predictor: &PredictorConfig,
    trained: Option<&PredictorModel>,
) -> Result<Vec<f64>> {
    match predictor {
        PredictorConfig::Oracle => {
            if !table.schema().predicted_signals.contains(&signal.to_string()) {
                return Err(Error::Data(format!(
                    "oracle predictor for signal '{signal}' needs an 'x:{signal}' column"
                )));
            }
            Ok(table.rows().iter().map(|r| r.predicted[signal]).collect())
        }
        PredictorConfig::Trained { .. } => {
            let model = trained.ok_or_else(|| {
                Error::Artifact(format!(
                    "artifact for signal '{signal}' has no predictor but the \
                     configuration says it was trained"
                ))
            })?;
            keys.iter()
                .map(|key| model.predict(&FeatureVector::new(encoder.encode(key)?)?))
                .collect()
        }
    }
}

/// Step 1 (predictor training) and Step 2 (conditional model fitting)
/// for every configured signal.
pub fn run_fit(
    config: &ExperimentConfig,
    master_seed: u64,
    table: &DataTable,
) -> Result<(BTreeMap<String, ModelArtifact>, FitSummary)> {
    let spec = config.bias_spec()?;
    let signals = config.signal_names();
    require_signal_columns(table, &signals)?;
    if table.is_empty() {
        return Err(Error::EmptyInput("cannot fit models on an empty table".into()));
    }
    let keys = discretized_keys(table, &spec)?;
    let encoder = BiasFeatureEncoder::new(spec.clone());
    let train_seed = mix_seed(master_seed, STREAM_TRAIN);
    let mut artifacts = BTreeMap::new();
    let mut summary = FitSummary::default();
    for (index, signal) in signals.iter().enumerate() {
        let predictor_config = &config.predictor[signal];
        let predictor = match predictor_config {
            PredictorConfig::Oracle => None,
            PredictorConfig::Trained { train, link } => {
                let mut train = train.clone();
                train.seed = mix_seed(mix_seed(train_seed, 2 * index as u64), train.seed);
                let data: Vec<(FeatureVector, f64)> = keys
                    .iter()
                    .zip(table.rows())
                    .map(|(key, row)| {
                        Ok((
                            FeatureVector::new(encoder.encode(key)?)?,
                            row.observed[signal],
                        ))
                    })
                    .collect::<Result<_>>()?;
                Some(match link {
                    LinkKind::Identity => train_regressor(&data, signal, &train)?,
                    LinkKind::Logistic => train_classifier(&data, signal, &train)?,
                })
            }
        };
        let predictions = signal_predictions(
            table,
            &keys,
            &encoder,
            signal,
            predictor_config,
            predictor.as_ref(),
        )?;
        let records: Vec<(f64, BiasKey)> = predictions
            .iter()
            .copied()
            .zip(keys.iter().cloned())
            .collect();
        let options = config.conddist.fit_options();
        let model = match config.conddist.estimator {
            ConfigEstimator::Empirical => {
                ConditionalModel::fit_empirical(records, spec.clone(), signal, options)?
            }
            ConfigEstimator::Gaussian | ConfigEstimator::Lognormal => {
                let family = match config.conddist.estimator {
                    ConfigEstimator::Gaussian => crate::summary::ParametricFamily::Gaussian,
                    _ => crate::summary::ParametricFamily::Lognormal,
                };
                ConditionalModel::fit_parametric(records, spec.clone(), signal, family, options)?
            }
            ConfigEstimator::QuantileRegression => {
                let section = &config.conddist.quantile_regression;
                let mut train = section.train.clone();
                train.seed = mix_seed(mix_seed(train_seed, 2 * index as u64 + 1), train.seed);
                fit_quantile_model(
                    records,
                    spec.clone(),
                    signal,
                    options,
                    &section.levels(),
                    &train,
                )?
            }
        };
        let mut bucket_counts = BTreeMap::new();
        let mut sparse_buckets = Vec::new();
        for key in model.bucket_keys() {
            let count = model.bucket_count(key)?;
            if count < config.conddist.min_bucket_count {
                sparse_buckets.push(key.label());
            }
            bucket_counts.insert(key.label(), count);
        }
        summary.per_signal.insert(
            signal.clone(),
            SignalFitSummary {
                trained: predictor.is_some(),
                bucket_counts,
                sparse_buckets,
            },
        );
        artifacts.insert(signal.clone(), ModelArtifact::new(model, predictor)?);
    }
    Ok((artifacts, summary))
}

/// Scores every row: per-signal aligned `z:` columns plus the fused
/// `z_final`. Input columns pass through unchanged except `x:` columns
/// of trained signals, which are (re)filled from the stored predictor.
pub fn run_transform(
    config: &ExperimentConfig,
    master_seed: u64,
    table: &DataTable,
    artifacts: &BTreeMap<String, ModelArtifact>,
) -> Result<DataTable> {
    let spec = config.bias_spec()?;
    let signals = config.signal_names();
    require_signal_columns(table, &signals)?;
    for signal in &signals {
        let artifact = artifacts.get(signal).ok_or_else(|| {
            Error::Artifact(format!("no model artifact for configured signal '{signal}'"))
        })?;
        artifact.verify_spec(&spec)?;
    }
    let keys = discretized_keys(table, &spec)?;
    let encoder = BiasFeatureEncoder::new(spec.clone());
    let models: BTreeMap<String, ConditionalModel> = signals
        .iter()
        .map(|s| (s.clone(), artifacts[s].model.clone()))
        .collect();
    let mut predictions: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for signal in &signals {
        predictions.insert(
            signal.clone(),
            signal_predictions(
                table,
                &keys,
                &encoder,
                signal,
                &config.predictor[signal],
                artifacts[signal].predictor.as_ref(),
            )?,
        );
    }
    let transform_seed = mix_seed(master_seed, STREAM_TRANSFORM);
    let out_schema = TableSchema {
        has_z_true: table.schema().has_z_true,
        bias_dims: table.schema().bias_dims.clone(),
        observed_signals: table.schema().observed_signals.clone(),
        predicted_signals: signals.clone(),
        score_signals: signals.clone(),
        has_z_final: true,
    };
    let mut out = DataTable::new(out_schema)?;
    for (i, row) in table.rows().iter().enumerate() {
        let row_predictions: BTreeMap<String, f64> = signals
            .iter()
            .map(|s| (s.clone(), predictions[s][i]))
            .collect();
        let row_keys: BTreeMap<String, BiasKey> = signals
            .iter()
            .map(|s| (s.clone(), keys[i].clone()))
            .collect();
        let tie_mode = match config.alignment.tie_mode {
            ConfigTieMode::Deterministic => TieMode::Deterministic,
            ConfigTieMode::Randomized => TieMode::Randomized {
                seed: mix_seed(transform_seed, row.record_id),
            },
        };
        let score = score_pipeline(
            &row_predictions,
            &row_keys,
            &models,
            &config.alignment.signals,
            &config.fusion,
            tie_mode,
        )?;
        out.push(DataRow {
            record_id: row.record_id,
            z_true: row.z_true,
            bias: row.bias.clone(),
            observed: row.observed.clone(),
            predicted: row_predictions,
            scores: score
                .per_signal
                .iter()
                .map(|(name, s)| (name.clone(), s.z))
                .collect(),
            z_final: Some(score.z_final),
        })?;
    }
    Ok(out)
}

/// Computes the before/after independence and recovery metrics on a
/// transformed table.
pub fn run_evaluate(
    config: &ExperimentConfig,
    master_seed: u64,
    table: &DataTable,
    artifact_fingerprints: BTreeMap<String, String>,
) -> Result<ExperimentReport> {
    let spec = config.bias_spec()?;
    let signals = config.signal_names();
    require_signal_columns(table, &signals)?;
    for signal in &signals {
        if !table.schema().score_signals.contains(signal) {
            return Err(Error::Data(format!(
                "table has no aligned column 'z:{signal}'; run the transform stage first"
            )));
        }
    }
    if !table.schema().has_z_final {
        return Err(Error::Data(
            "table has no 'z_final' column; run the transform stage first".into(),
        ));
    }
    if table.is_empty() {
        return Err(Error::EmptyInput("cannot evaluate an empty table".into()));
    }
    let keys = discretized_keys(table, &spec)?;
    let z_true: Option<Vec<f64>> = table
        .schema()
        .has_z_true
        .then(|| table.rows().iter().map(|r| r.z_true.unwrap()).collect());
    let eval = &config.evaluation;
    let eval_seed = mix_seed(master_seed, STREAM_EVALUATE);
    let mut reports = BTreeMap::new();
    for (index, signal) in signals.iter().enumerate() {
        let alignment = &config.alignment.signals[signal];
        let observed: Vec<f64> = table.rows().iter().map(|r| r.observed[signal]).collect();
        let aligned: Vec<f64> = table.rows().iter().map(|r| r.scores[signal]).collect();
        let mi_raw = metrics::mutual_information_binned(
            &observed,
            &keys,
            eval.mi_bins,
            mix_seed(eval_seed, 2 * index as u64),
        )?;
        let mi_aligned = metrics::mutual_information_binned(
            &aligned,
            &keys,
            eval.mi_bins,
            mix_seed(eval_seed, 2 * index as u64 + 1),
        )?;
        let (global_ks, per_bucket_ks) = match alignment.method {
            crate::align::ScoreMethod::Quantile => {
                let target = alignment
                    .target
                    .clone()
                    .unwrap_or(TargetDistribution::Uniform01);
                let global = metrics::ks_against_target(&aligned, &target)?
                    .with_threshold(eval.ks_global_threshold);
                let mut grouped: BTreeMap<&BiasKey, Vec<f64>> = BTreeMap::new();
                for (key, &z) in keys.iter().zip(&aligned) {
                    grouped.entry(key).or_default().push(z);
                }
                let mut per_bucket = BTreeMap::new();
                for (key, zs) in grouped {
                    if (zs.len() as u64) < eval.min_bucket_evaluation_count {
                        continue;
                    }
                    per_bucket.insert(
                        key.label(),
                        metrics::ks_against_target(&zs, &target)?
                            .with_threshold(eval.ks_bucket_threshold),
                    );
                }
                (Some(global), Some(per_bucket))
            }
            crate::align::ScoreMethod::Mean => (None, None),
        };
        let (spearman_raw, spearman_aligned) = match &z_true {
            Some(truth) => (
                optional_rank_correlation(&observed, truth)?,
                optional_rank_correlation(&aligned, truth)?,
            ),
            None => (None, None),
        };
        let bucket_stats = metrics::bucket_stats(&aligned, &keys)?
            .into_iter()
            .map(|(key, stat)| (key.label(), stat))
            .collect();
        reports.insert(
            signal.clone(),
            SignalReport {
                method: alignment.method,
                mi_raw,
                mi_aligned,
                per_bucket_ks,
                global_ks,
                spearman_raw,
                spearman_aligned,
                bucket_stats,
            },
        );
    }
    let z_final: Vec<f64> = table.rows().iter().map(|r| r.z_final.unwrap()).collect();
    let fused_mi = metrics::mutual_information_binned(
        &z_final,
        &keys,
        eval.mi_bins,
        mix_seed(eval_seed, 2 * signals.len() as u64),
    )?;
    let fused_spearman = match &z_true {
        Some(truth) => optional_rank_correlation(&z_final, truth)?,
        None => None,
    };
    let fused_methods: Vec<_> = config
        .fusion
        .weights()
        .iter()
        .filter(|(_, w)| **w != 0.0)
        .map(|(name, _)| config.alignment.signals[name].method)
        .collect();
    let mixed_methods = fused_methods.windows(2).any(|pair| pair[0] != pair[1]);
    Ok(ExperimentReport {
        format_version: REPORT_FORMAT_VERSION,
        master_seed,
        n_records: table.len() as u64,
        config_fingerprint: config.fingerprint()?,
        artifact_fingerprints,
        signals: reports,
        fused: FusedReport {
            mi: fused_mi,
            spearman: fused_spearman,
            mixed_methods,
        },
    })
}

/// Rank correlation, with degenerate (constant) input reported as
/// unavailable rather than failing the whole evaluation.
fn optional_rank_correlation(a: &[f64], b: &[f64]) -> Result<Option<f64>> {
    match metrics::rank_correlation(a, b) {
        Ok(rho) => Ok(Some(rho)),
        Err(Error::Degenerate(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

/// simulate → fit → transform → evaluate, identical to running the four
/// stages by hand with the same config and seed.
pub fn run_pipeline(config: &ExperimentConfig, master_seed: u64) -> Result<PipelineOutput> {
    let data = run_simulate(config, master_seed)?;
    let (artifacts, fit_summary) = run_fit(config, master_seed, &data)?;
    let transformed = run_transform(config, master_seed, &data, &artifacts)?;
    let mut fingerprints = BTreeMap::new();
    for (signal, artifact) in &artifacts {
        fingerprints.insert(signal.clone(), artifact.fingerprint()?);
    }
    let report = run_evaluate(config, master_seed, &transformed, fingerprints)?;
    Ok(PipelineOutput {
        data,
        artifacts,
        fit_summary,
        transformed,
        report,
    })
}
