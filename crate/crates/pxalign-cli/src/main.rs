//! Command-line front end for the alignment pipeline. Every subcommand
//! is a thin file-handling shell around one library stage; all
//! randomness flows from the configured (or overridden) master seed, so
//! rerunning a command with the same inputs reproduces its outputs byte
//! for byte.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use pxalign::artifact::ModelArtifact;
use pxalign::config::ExperimentConfig;
use pxalign::data::DataTable;
use pxalign::pipeline::{self, FitSummary};
use pxalign::report::ExperimentReport;

#[derive(Parser)]
#[command(
    name = "pxalign",
    version,
    about = "Estimate conditional score distributions per bias bucket and align \
             predicted behaviors into bias-independent interest scores"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Master seed; defaults to the config's master_seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn load(&self) -> Result<(ExperimentConfig, u64)> {
        let config = ExperimentConfig::load(&self.config)
            .with_context(|| format!("loading config {}", self.config.display()))?;
        let seed = self.seed.unwrap_or(config.master_seed);
        Ok((config, seed))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Draw the synthetic dataset declared by the configuration.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit per-signal conditional models (and predictors, where
    /// configured) on a dataset, saving one artifact per signal.
    Fit {
        #[command(flatten)]
        common: Common,
        /// Input data CSV.
        #[arg(long)]
        data: PathBuf,
        /// Directory to write `<signal>.json` artifacts into.
        #[arg(long)]
        models: PathBuf,
    },
    /// Score a dataset with saved artifacts, appending per-signal
    /// aligned scores and the fused score.
    Transform {
        #[command(flatten)]
        common: Common,
        /// Input data CSV.
        #[arg(long)]
        data: PathBuf,
        /// Directory holding `<signal>.json` artifacts.
        #[arg(long)]
        models: PathBuf,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute independence and recovery metrics for a scored dataset.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Scored data CSV (output of `transform`).
        #[arg(long)]
        data: PathBuf,
        /// Directory holding `<signal>.json` artifacts.
        #[arg(long)]
        models: PathBuf,
        /// Report JSON output path.
        #[arg(long)]
        report: PathBuf,
        /// Optional flat CSV rendering of the report.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Run simulate, fit, transform, and evaluate in one go, writing
    /// every intermediate into the output directory.
    Pipeline {
        #[command(flatten)]
        common: Common,
        /// Output directory; defaults to the config's output.directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run() -> Result<()> {
    match Cli::parse().command {
        Command::Simulate { common, out } => simulate(&common, &out),
        Command::Fit {
            common,
            data,
            models,
        } => fit(&common, &data, &models),
        Command::Transform {
            common,
            data,
            models,
            out,
        } => transform(&common, &data, &models, &out),
        Command::Evaluate {
            common,
            data,
            models,
            report,
            csv,
        } => evaluate(&common, &data, &models, &report, csv.as_deref()),
        Command::Pipeline { common, out } => run_pipeline(&common, out),
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)
                .with_context(|| format!("creating directory {}", parent.display()))?;
        }
    }
    Ok(())
}

fn simulate(common: &Common, out: &Path) -> Result<()> {
    let (config, seed) = common.load()?;
    let table = pipeline::run_simulate(&config, seed)?;
    ensure_parent(out)?;
    table.save(out)?;
    println!("simulated {} records into {}", table.len(), out.display());
    Ok(())
}

fn fit(common: &Common, data: &Path, models: &Path) -> Result<()> {
    let (config, seed) = common.load()?;
    let table = DataTable::load(data)?;
    let (artifacts, summary) = pipeline::run_fit(&config, seed, &table)?;
    fs::create_dir_all(models)
        .with_context(|| format!("creating directory {}", models.display()))?;
    for (signal, artifact) in &artifacts {
        let path = models.join(format!("{signal}.json"));
        artifact.save(&path)?;
        println!("saved model for '{signal}' to {}", path.display());
    }
    print_fit_summary(&config, &summary);
    Ok(())
}

fn print_fit_summary(config: &ExperimentConfig, summary: &FitSummary) {
    for (signal, s) in &summary.per_signal {
        let source = if s.trained {
            "trained predictor"
        } else {
            "oracle predictions"
        };
        println!(
            "fitted '{signal}' from {source}: {} occupied buckets",
            s.bucket_counts.len()
        );
        for label in &s.sparse_buckets {
            println!(
                "warning: '{signal}' bucket {label} has {} training records \
                 (below min_bucket_count {}), queries lean on the pooled fallback",
                s.bucket_counts[label], config.conddist.min_bucket_count
            );
        }
    }
}

fn load_artifacts(config: &ExperimentConfig, models: &Path) -> Result<BTreeMap<String, ModelArtifact>> {
    let mut artifacts = BTreeMap::new();
    for signal in config.signal_names() {
        let path = models.join(format!("{signal}.json"));
        let artifact = ModelArtifact::load(&path)
            .with_context(|| format!("loading model artifact {}", path.display()))?;
        artifacts.insert(signal, artifact);
    }
    Ok(artifacts)
}

fn transform(common: &Common, data: &Path, models: &Path, out: &Path) -> Result<()> {
    let (config, seed) = common.load()?;
    let table = DataTable::load(data)?;
    let artifacts = load_artifacts(&config, models)?;
    let scored = pipeline::run_transform(&config, seed, &table, &artifacts)?;
    ensure_parent(out)?;
    scored.save(out)?;
    println!("scored {} records into {}", scored.len(), out.display());
    Ok(())
}

fn evaluate(
    common: &Common,
    data: &Path,
    models: &Path,
    report_path: &Path,
    csv: Option<&Path>,
) -> Result<()> {
    let (config, seed) = common.load()?;
    let table = DataTable::load(data)?;
    let artifacts = load_artifacts(&config, models)?;
    let mut fingerprints = BTreeMap::new();
    for (signal, artifact) in &artifacts {
        artifact.verify_spec(&config.bias_spec()?)?;
        fingerprints.insert(signal.clone(), artifact.fingerprint()?);
    }
    let report = pipeline::run_evaluate(&config, seed, &table, fingerprints)?;
    ensure_parent(report_path)?;
    report.save(report_path)?;
    println!("wrote report to {}", report_path.display());
    if let Some(csv_path) = csv {
        ensure_parent(csv_path)?;
        report.save_csv(csv_path)?;
        println!("wrote flat metrics to {}", csv_path.display());
    }
    print_report_summary(&report);
    Ok(())
}

fn print_report_summary(report: &ExperimentReport) {
    for (signal, s) in &report.signals {
        println!(
            "'{signal}': MI {:.4} -> {:.4} nats (noise floor {:.4})",
            s.mi_raw.nats, s.mi_aligned.nats, s.mi_aligned.noise_floor_nats
        );
        if let Some(ks) = &s.global_ks {
            let verdict = match ks.passes() {
                Some(true) => "pass",
                Some(false) => "FAIL",
                None => "no threshold",
            };
            println!(
                "'{signal}': global uniformity KS {:.5} ({verdict})",
                ks.d_statistic
            );
        }
        if let Some(buckets) = &s.per_bucket_ks {
            if let Some((label, worst)) = buckets
                .iter()
                .max_by(|a, b| a.1.d_statistic.total_cmp(&b.1.d_statistic))
            {
                println!(
                    "'{signal}': worst bucket KS {:.5} at bucket {label} \
                     ({} buckets evaluated)",
                    worst.d_statistic,
                    buckets.len()
                );
            }
        }
        if let Some(rho) = s.spearman_aligned {
            println!("'{signal}': Spearman against latent interest {rho:.4}");
        }
    }
    println!(
        "fused: MI {:.4} nats (noise floor {:.4})",
        report.fused.mi.nats, report.fused.mi.noise_floor_nats
    );
    if report.fused.mixed_methods {
        println!(
            "warning: fused signals mix quantile and mean methods; z_final \
             combines bounded and unbounded scales"
        );
    }
}

fn run_pipeline(common: &Common, out: Option<PathBuf>) -> Result<()> {
    let (config, seed) = common.load()?;
    let dir = out.unwrap_or_else(|| config.output.directory.clone());
    if dir.as_os_str().is_empty() {
        bail!("output directory is empty; pass --out or set output.directory");
    }
    let models_dir = dir.join("models");
    fs::create_dir_all(&models_dir)
        .with_context(|| format!("creating directory {}", models_dir.display()))?;
    let output = pipeline::run_pipeline(&config, seed)?;
    output.data.save(dir.join("data.csv"))?;
    for (signal, artifact) in &output.artifacts {
        artifact.save(models_dir.join(format!("{signal}.json")))?;
    }
    output.transformed.save(dir.join("scored.csv"))?;
    output.report.save(dir.join("report.json"))?;
    output.report.save_csv(dir.join("report.csv"))?;
    println!(
        "pipeline complete: {} records, outputs in {}",
        output.data.len(),
        dir.display()
    );
    print_fit_summary(&config, &output.fit_summary);
    print_report_summary(&output.report);
    Ok(())
}
