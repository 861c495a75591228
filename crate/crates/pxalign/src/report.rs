//! Experiment reports: the measured evidence that alignment removed the
//! bias, in a structured document and a flat CSV table.
//!
//! Every metric row is traceable to a (dataset, signal, method) triple,
//! and the report embeds the content fingerprints of the configuration
//! and of every model artifact that produced the scores, so a report can
//! be matched to the exact inputs that generated it.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::align::ScoreMethod;
use crate::error::{Error, Result};
use crate::metrics::{BucketStat, KsResult, MiEstimate};

pub const REPORT_FORMAT_VERSION: u32 = 1;

/// Metrics for one signal, before and after alignment. Bucket tables are
/// keyed by [`crate::bias::BiasKey::label`] strings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalReport {
    pub method: ScoreMethod,
    /// MI between the observed signal and the bias key.
    pub mi_raw: MiEstimate,
    /// MI between the aligned score and the bias key.
    pub mi_aligned: MiEstimate,
    /// Per-bucket KS of the aligned score against the configured target
    /// law, for buckets meeting the evaluation count floor. Absent for
    /// mean-aligned signals, whose scores follow no prescribed law.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_bucket_ks: Option<BTreeMap<String, KsResult>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub global_ks: Option<KsResult>,
    /// Rank correlation with the latent interest, when the dataset
    /// carries it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spearman_raw: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spearman_aligned: Option<f64>,
    /// Aligned-score mean/std per bucket.
    pub bucket_stats: BTreeMap<String, BucketStat>,
}

/// Metrics for the fused score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusedReport {
    pub mi: MiEstimate,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spearman: Option<f64>,
    /// True when signals aligned by different methods were fused, mixing
    /// bounded and unbounded score scales.
    pub mixed_methods: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub format_version: u32,
    pub master_seed: u64,
    pub n_records: u64,
    pub config_fingerprint: String,
    /// Signal name to model artifact content hash.
    pub artifact_fingerprints: BTreeMap<String, String>,
    pub signals: BTreeMap<String, SignalReport>,
    pub fused: FusedReport,
}

impl ExperimentReport {
    pub fn to_json(&self) -> Result<String> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        Ok(text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let report: Self = serde_json::from_str(text)?;
        if report.format_version != REPORT_FORMAT_VERSION {
            return Err(Error::Artifact(format!(
                "unsupported report format version {} (this build reads {})",
                report.format_version, REPORT_FORMAT_VERSION
            )));
        }
        Ok(report)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Artifact(format!("cannot read report {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Flat `metric,signal,method,bucket,value` table with one row per
    /// number in the report.
    pub fn to_csv_string(&self) -> Result<String> {
        let mut writer = csv::Writer::from_writer(Vec::new());
        writer.write_record(["metric", "signal", "method", "bucket", "value"])?;
        let mut emit = |metric: &str, signal: &str, method: &str, bucket: &str, value: f64| {
            writer.write_record([metric, signal, method, bucket, &format!("{value}")])
        };
        for (name, s) in &self.signals {
            let method = method_label(s.method);
            emit("mi_raw_nats", name, method, "", s.mi_raw.nats)?;
            emit(
                "mi_raw_noise_floor_nats",
                name,
                method,
                "",
                s.mi_raw.noise_floor_nats,
            )?;
            emit("mi_aligned_nats", name, method, "", s.mi_aligned.nats)?;
            emit(
                "mi_aligned_noise_floor_nats",
                name,
                method,
                "",
                s.mi_aligned.noise_floor_nats,
            )?;
            if let Some(ks) = &s.global_ks {
                emit("ks_global", name, method, "", ks.d_statistic)?;
                if let Some(t) = ks.threshold {
                    emit("ks_global_threshold", name, method, "", t)?;
                }
            }
            if let Some(table) = &s.per_bucket_ks {
                for (bucket, ks) in table {
                    emit("ks_bucket", name, method, bucket, ks.d_statistic)?;
                }
            }
            if let Some(rho) = s.spearman_raw {
                emit("spearman_raw", name, method, "", rho)?;
            }
            if let Some(rho) = s.spearman_aligned {
                emit("spearman_aligned", name, method, "", rho)?;
            }
            for (bucket, stat) in &s.bucket_stats {
                emit("bucket_count", name, method, bucket, stat.count as f64)?;
                emit("bucket_mean", name, method, bucket, stat.mean)?;
                emit("bucket_std", name, method, bucket, stat.std)?;
            }
        }
        emit("mi_fused_nats", "z_final", "fused", "", self.fused.mi.nats)?;
        emit(
            "mi_fused_noise_floor_nats",
            "z_final",
            "fused",
            "",
            self.fused.mi.noise_floor_nats,
        )?;
        if let Some(rho) = self.fused.spearman {
            emit("spearman_fused", "z_final", "fused", "", rho)?;
        }
        emit(
            "mixed_methods",
            "z_final",
            "fused",
            "",
            if self.fused.mixed_methods { 1.0 } else { 0.0 },
        )?;
        let bytes = writer
            .into_inner()
            .map_err(|e| Error::Data(format!("csv buffer error: {e}")))?;
        String::from_utf8(bytes).map_err(|e| Error::Data(format!("non-utf8 csv output: {e}")))
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_csv_string()?)?;
        Ok(())
    }
}

fn method_label(method: ScoreMethod) -> &'static str {
    match method {
        ScoreMethod::Quantile => "quantile",
        ScoreMethod::Mean => "mean",
    }
}
