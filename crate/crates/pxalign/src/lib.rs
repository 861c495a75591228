//! Bias-conditional score alignment.
//!
//! Predicted user behaviors (watch time, click probability, ...) soak up
//! presentation bias: the same latent interest produces very different
//! predictions depending on device, page position, or session context.
//! This crate removes that dependence. It discretizes the bias factors
//! into buckets ([`bias`]), estimates the conditional distribution of
//! each predicted behavior given the bucket ([`conddist`], [`quantreg`]),
//! and maps every prediction through its own bucket's CDF ([`align`]).
//! The resulting score is uniform within every bucket, hence independent
//! of the bias factors, while preserving within-bucket ranking. Scores
//! can be reshaped to a target distribution and fused across signals
//! with fixed weights.
//!
//! Supporting modules: [`behavior`] trains the linear predictors whose
//! outputs get aligned, [`simulate`] draws synthetic populations with
//! known ground truth, [`metrics`] quantifies residual dependence and
//! rank preservation, [`data`]/[`artifact`]/[`report`] give every input
//! and output a deterministic serialized form, [`config`] declares a
//! whole experiment in one TOML file, and [`pipeline`] runs the stages:
//! simulate, fit, transform, evaluate.

pub mod align;
pub mod artifact;
pub mod behavior;
pub mod bias;
pub mod conddist;
pub mod config;
pub mod data;
pub mod error;
pub mod exact;
pub mod metrics;
pub mod numeric;
pub mod pipeline;
pub mod quantreg;
pub mod report;
pub mod simulate;
pub mod summary;

pub use align::{
    fuse, mean_align, quantile_map, score_pipeline, to_target, AlignedScore, FusionWeights,
    ScoreMethod, SignalAlignment, SignalScore, TargetDistribution, TieMode,
};
pub use artifact::{ModelArtifact, MODEL_FORMAT_VERSION};
pub use bias::{BiasDimension, BiasKey, BiasSpec, DimensionKind};
pub use conddist::{ConditionalModel, EstimatorKind, FitOptions, TransformSpace};
pub use config::ExperimentConfig;
pub use data::{DataRow, DataTable, TableSchema};
pub use error::{Error, Result};
pub use metrics::{
    bucket_stats, ks_against_target, ks_uniformity, mutual_information_binned, rank_correlation,
    BucketStat, KsResult, MiEstimate,
};
pub use pipeline::{
    run_evaluate, run_fit, run_pipeline, run_simulate, run_transform, FitSummary, PipelineOutput,
    SignalFitSummary,
};
pub use report::{ExperimentReport, FusedReport, SignalReport, REPORT_FORMAT_VERSION};
pub use summary::{DistributionSummary, EmpiricalSummary, ParametricFamily, ParametricSummary};
