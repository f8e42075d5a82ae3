//! Ablation suites: run a preset's (variant, seed) grid against a shared
//! dataset, mark failures without stopping, and reduce the survivors to a
//! per-variant summary plus the separation-robustness correlation.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::models::{Variant, ALL_VARIANTS};

use super::config::{parse_config_str, ExperimentConfig};
use super::experiment::{run_experiment, RunOutputs};
use super::export::{
    long_rows_to_csv, runlog_long_rows, summarize_long, ExportKind, LongRow, SummaryTable,
};
use super::runlog::RunLog;

/// Geometric learning-rate grid for the optional sweep mode, centered on the
/// desk default.
pub const LR_SWEEP: [f64; 4] = [2.5e-4, 5e-4, 1e-3, 2e-3];

/// Export kinds whose long rows feed the summary reduction.
const SUMMARY_KINDS: [ExportKind; 3] =
    [ExportKind::NcMetrics, ExportKind::Accuracy, ExportKind::Robustness];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SuitePreset {
    /// All eleven variants.
    Full,
    /// The headline pair: LPC against the unpenalized baseline.
    Quick,
    /// The four-variant spread used for the separation-robustness
    /// correlation: two collapsing methods against two margin baselines
    /// whose latent geometry is stable across seeds.
    Correlation,
}

impl SuitePreset {
    pub fn parse(s: &str) -> Result<SuitePreset> {
        match s {
            "full" => Ok(SuitePreset::Full),
            "quick" => Ok(SuitePreset::Quick),
            "correlation" => Ok(SuitePreset::Correlation),
            other => Err(Error::Config(format!(
                "unknown suite preset {other:?}; expected full, quick, or correlation"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SuitePreset::Full => "full",
            SuitePreset::Quick => "quick",
            SuitePreset::Correlation => "correlation",
        }
    }

    pub fn variants(&self) -> Vec<Variant> {
        match self {
            SuitePreset::Full => ALL_VARIANTS.to_vec(),
            SuitePreset::Quick => vec![Variant::Lpc, Variant::NoPen],
            SuitePreset::Correlation => {
                vec![Variant::Lpc, Variant::LpcScl, Variant::ArcFace, Variant::CosFace]
            }
        }
    }
}

/// Shared settings for every run in a suite. `base` supplies the dataset and
/// training protocol; its variant/seed/output_dir/penultimate settings are
/// replaced per run (each variant trains at its own default penultimate
/// width).
#[derive(Debug, Clone)]
pub struct SuiteOptions {
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    pub lr_sweep: bool,
    pub base: ExperimentConfig,
}

impl SuiteOptions {
    pub fn new(seeds: Vec<u64>, out_dir: PathBuf) -> Self {
        SuiteOptions { seeds, out_dir, lr_sweep: false, base: suite_base_config() }
    }
}

/// Desk-scale shared protocol. Wider blobs than the dataset default so the
/// baselines keep a nontrivial boundary, and small batches at a raised
/// learning rate: the optimizer's per-step displacement is capped by the
/// learning rate, so collapse quality tracks step count x rate, and 500
/// epochs of small batches lets the classifier keep pace with the ramped
/// penalty all the way to the cap.
pub fn suite_base_config() -> ExperimentConfig {
    let text = "variant = LPC\n\
                dataset.per_class = 100\n\
                dataset.test_per_class = 30\n\
                dataset.sigma = 0.3\n\
                train.epochs = 500\n\
                train.batch_size = 16\n\
                train.learning_rate = 2e-3\n\
                train.metric_cadence = 50\n\
                attack.max_samples = 60\n";
    parse_config_str(text).expect("suite base config is well-formed")
}

/// One grid cell's outcome. Failures carry the error text and `None`
/// metrics; they never abort the suite.
#[derive(Debug, Clone)]
pub struct SuiteRunReport {
    /// Summary grouping key: the variant name, tagged with the learning
    /// rate in sweep mode.
    pub label: String,
    pub variant: Variant,
    pub seed: u64,
    pub learning_rate: f64,
    pub out_dir: PathBuf,
    pub error: Option<String>,
    pub tpt_epoch: Option<usize>,
    pub test_accuracy: Option<f64>,
    pub mean_radius: Option<f64>,
    pub sigma_w_trace: Option<f64>,
    pub norm_cov: Option<f64>,
    pub entropy_per_dim: Option<f64>,
    pub separation_ratio: Option<f64>,
    pub robustness_mean: Option<f64>,
    pub robustness_median: Option<f64>,
    pub robustness_converged_frac: Option<f64>,
    /// Highest test accuracy within the variant's runs; reported, never
    /// silently selected.
    pub best: bool,
}

#[derive(Debug, Clone)]
pub struct SuiteOutcome {
    pub out_dir: PathBuf,
    pub runs: Vec<SuiteRunReport>,
    pub summary: SummaryTable,
    /// Pearson r between the final class-separation ratio and the median
    /// DeepFool resistance across successful runs; `None` below two usable
    /// runs or under zero variance. The median is deliberate: on strongly
    /// collapsed models a single near-parallel boundary pair can blow the
    /// per-sample ratio (and thus the mean) up by orders of magnitude.
    pub pearson_separation_robustness: Option<f64>,
    pub long_rows: Vec<LongRow>,
}

struct Job {
    label: String,
    variant: Variant,
    seed: u64,
    learning_rate: f64,
    cfg: ExperimentConfig,
}

fn run_config(
    base: &ExperimentConfig,
    variant: Variant,
    seed: u64,
    lr: f64,
    out_dir: &Path,
) -> ExperimentConfig {
    let mut cfg = base.clone();
    cfg.variant = variant;
    cfg.seed = seed;
    cfg.train.learning_rate = lr;
    cfg.output_dir = out_dir.to_string_lossy().into_owned();
    cfg.pen_dim = variant.default_pen_dim();
    cfg.margin = variant.margin_kind().map(|_| base.margin.unwrap_or_default());
    cfg.supcon = variant.uses_supcon().then(|| base.supcon.unwrap_or_default());
    cfg
}

pub fn ablation_suite(preset: SuitePreset, opts: &SuiteOptions) -> Result<SuiteOutcome> {
    if opts.seeds.is_empty() {
        return Err(Error::Config("suite needs at least one seed".into()));
    }
    fs::create_dir_all(&opts.out_dir)
        .map_err(|e| Error::io(opts.out_dir.display().to_string(), e))?;

    let lrs: Vec<f64> =
        if opts.lr_sweep { LR_SWEEP.to_vec() } else { vec![opts.base.train.learning_rate] };

    let mut jobs = Vec::new();
    for variant in preset.variants() {
        for &lr in &lrs {
            for &seed in &opts.seeds {
                let label = if opts.lr_sweep {
                    format!("{variant}@{lr}")
                } else {
                    variant.name().to_string()
                };
                let dir_name = if opts.lr_sweep {
                    format!("{variant}-lr{lr}-s{seed}")
                } else {
                    format!("{variant}-s{seed}")
                };
                let run_dir = opts.out_dir.join("runs").join(dir_name);
                jobs.push(Job {
                    label,
                    variant,
                    seed,
                    learning_rate: lr,
                    cfg: run_config(&opts.base, variant, seed, lr, &run_dir),
                });
            }
        }
    }

    let results = run_all(&jobs);

    let mut runs: Vec<SuiteRunReport> = jobs
        .iter()
        .zip(results)
        .map(|(job, result)| report_for(job, result))
        .collect();
    mark_best(&mut runs);

    // The summary is a pure reduction over the long rows re-read from each
    // run's on-disk log — the same rows the export files carry.
    let mut long_rows = Vec::new();
    for run in runs.iter().filter(|r| r.error.is_none()) {
        let log = RunLog::read_csv(&run.out_dir.join("runlog.csv"))?;
        for kind in SUMMARY_KINDS {
            long_rows.extend(runlog_long_rows(&log, kind, &run.label, run.seed));
        }
    }
    for kind in SUMMARY_KINDS {
        let rows: Vec<LongRow> =
            long_rows.iter().filter(|r| kind_of(&r.metric) == Some(kind)).cloned().collect();
        let path = opts.out_dir.join(format!("export_{}.csv", kind.name()));
        fs::write(&path, long_rows_to_csv(&rows))
            .map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    let summary = summarize_long(&long_rows);
    let summary_path = opts.out_dir.join("suite_summary.csv");
    fs::write(&summary_path, summary.to_csv_string())
        .map_err(|e| Error::io(summary_path.display().to_string(), e))?;

    let runs_path = opts.out_dir.join("suite_runs.csv");
    fs::write(&runs_path, runs_csv(&runs))
        .map_err(|e| Error::io(runs_path.display().to_string(), e))?;

    let pairs: Vec<(f64, f64)> = runs
        .iter()
        .filter_map(|r| Some((r.separation_ratio?, r.robustness_median?)))
        .collect();
    let xs: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let pearson_separation_robustness = pearson(&xs, &ys);
    let corr_path = opts.out_dir.join("correlation.txt");
    let corr_text = format!(
        "pearson_r_separation_vs_robustness = {}\nruns = {}\n",
        pearson_separation_robustness.map(|v| v.to_string()).unwrap_or_else(|| "NA".into()),
        pairs.len()
    );
    fs::write(&corr_path, corr_text).map_err(|e| Error::io(corr_path.display().to_string(), e))?;

    Ok(SuiteOutcome {
        out_dir: opts.out_dir.clone(),
        runs,
        summary,
        pearson_separation_robustness,
        long_rows,
    })
}

/// Metric-name → export kind, for splitting the pooled rows back into
/// per-kind files.
fn kind_of(metric: &str) -> Option<ExportKind> {
    match metric {
        "sigma_w_trace" | "nc1" | "separation_ratio" | "mean_radius" | "norm_cov"
        | "entropy_per_dim" | "nc2_equinorm" | "nc2_equiangularity_dev" | "nc2_cos_std" => {
            Some(ExportKind::NcMetrics)
        }
        "llh" | "sigma" | "peaks" => Some(ExportKind::Binarity),
        "loss_ce" | "loss_l2" | "loss_aux" => Some(ExportKind::Losses),
        "train_accuracy" | "test_accuracy" => Some(ExportKind::Accuracy),
        "robustness_mean" | "robustness_median" | "robustness_converged_frac" => {
            Some(ExportKind::Robustness)
        }
        _ => None,
    }
}

/// Runs jobs as independent tasks with disjoint output directories,
/// `available_parallelism` at a time, results in job order. A panicking run
/// is recorded as a failed run, not a suite failure.
fn run_all(jobs: &[Job]) -> Vec<Result<RunOutputs>> {
    if jobs.is_empty() {
        return Vec::new();
    }
    let width = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1).clamp(1, 8);
    let mut results: Vec<Option<Result<RunOutputs>>> = jobs.iter().map(|_| None).collect();
    for start in (0..jobs.len()).step_by(width) {
        let end = (start + width).min(jobs.len());
        let chunk: Vec<Result<RunOutputs>> = std::thread::scope(|s| {
            let handles: Vec<_> =
                jobs[start..end].iter().map(|job| s.spawn(|| run_experiment(&job.cfg))).collect();
            handles
                .into_iter()
                .map(|h| {
                    h.join().unwrap_or_else(|_| {
                        Err(Error::Numeric("run panicked; see its output directory".into()))
                    })
                })
                .collect()
        });
        for (i, r) in chunk.into_iter().enumerate() {
            results[start + i] = Some(r);
        }
    }
    results.into_iter().map(|r| r.expect("every chunk filled its slots")).collect()
}

fn report_for(job: &Job, result: Result<RunOutputs>) -> SuiteRunReport {
    let mut report = SuiteRunReport {
        label: job.label.clone(),
        variant: job.variant,
        seed: job.seed,
        learning_rate: job.learning_rate,
        out_dir: PathBuf::from(&job.cfg.output_dir),
        error: None,
        tpt_epoch: None,
        test_accuracy: None,
        mean_radius: None,
        sigma_w_trace: None,
        norm_cov: None,
        entropy_per_dim: None,
        separation_ratio: None,
        robustness_mean: None,
        robustness_median: None,
        robustness_converged_frac: None,
        best: false,
    };
    match result {
        Ok(out) => {
            report.tpt_epoch = out.tpt_epoch;
            report.test_accuracy = Some(out.final_test_accuracy);
            report.mean_radius = Some(out.mean_radius);
            report.sigma_w_trace = Some(out.final_report.sigma_w_trace);
            report.norm_cov = Some(out.final_report.norm_cov);
            report.entropy_per_dim = Some(out.final_report.entropy_per_dim);
            report.separation_ratio = Some(out.final_report.separation_ratio);
            report.robustness_mean = out.final_robustness.mean_rel_norm;
            report.robustness_median = out.final_robustness.median_rel_norm;
            report.robustness_converged_frac = Some(out.final_robustness.converged_frac);
        }
        Err(e) => {
            report.error = Some(e.to_string().replace(',', ";").replace('\n', "; "));
        }
    }
    report
}

/// Flags, per variant, the run with the highest test accuracy.
fn mark_best(runs: &mut [SuiteRunReport]) {
    for variant in ALL_VARIANTS {
        let best = runs
            .iter()
            .enumerate()
            .filter(|(_, r)| r.variant == variant)
            .filter_map(|(i, r)| r.test_accuracy.map(|a| (i, a)))
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(i, _)| i);
        if let Some(i) = best {
            runs[i].best = true;
        }
    }
}

fn runs_csv(runs: &[SuiteRunReport]) -> String {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_else(|| "NA".into());
    let mut s = String::from(
        "label,variant,seed,learning_rate,status,tpt_epoch,test_accuracy,mean_radius,\
         sigma_w_trace,norm_cov,entropy_per_dim,separation_ratio,robustness_mean,\
         robustness_median,robustness_converged_frac,best\n",
    );
    for r in runs {
        let status = match &r.error {
            None => "ok".to_string(),
            Some(e) => format!("failed: {e}"),
        };
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            r.label,
            r.variant,
            r.seed,
            r.learning_rate,
            status,
            r.tpt_epoch.map(|e| e.to_string()).unwrap_or_else(|| "NA".into()),
            opt(r.test_accuracy),
            opt(r.mean_radius),
            opt(r.sigma_w_trace),
            opt(r.norm_cov),
            opt(r.entropy_per_dim),
            opt(r.separation_ratio),
            opt(r.robustness_mean),
            opt(r.robustness_median),
            opt(r.robustness_converged_frac),
            if r.best { 1 } else { 0 },
        ));
    }
    s
}

/// Population-moment Pearson correlation; `None` when undefined (fewer than
/// two points or a constant series).
pub fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        cov += (x - mx) * (y - my);
        vx += (x - mx) * (x - mx);
        vy += (y - my) * (y - my);
    }
    if vx <= 0.0 || vy <= 0.0 {
        return None;
    }
    Some(cov / (vx.sqrt() * vy.sqrt()))
}
