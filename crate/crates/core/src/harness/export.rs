//! Tidy long-format plot exports and the summary reduction over them.
//!
//! A long row is (epoch, metric, value, variant, seed). The suite builds its
//! per-variant summary by reducing long rows, and the `export` CLI writes the
//! same rows to CSV — so concatenating exported files and re-running the
//! reduction reproduces the suite summary exactly.

use std::fmt;

use crate::error::{Error, Result};

use super::runlog::{RunLog, Split};

pub const LONG_HEADER: &str = "epoch,metric,value,variant,seed";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportKind {
    NcMetrics,
    Binarity,
    Losses,
    Accuracy,
    Robustness,
}

pub const ALL_EXPORT_KINDS: [ExportKind; 5] = [
    ExportKind::NcMetrics,
    ExportKind::Binarity,
    ExportKind::Losses,
    ExportKind::Accuracy,
    ExportKind::Robustness,
];

impl ExportKind {
    pub fn name(&self) -> &'static str {
        match self {
            ExportKind::NcMetrics => "nc_metrics",
            ExportKind::Binarity => "binarity",
            ExportKind::Losses => "losses",
            ExportKind::Accuracy => "accuracy",
            ExportKind::Robustness => "robustness",
        }
    }

    pub fn parse(s: &str) -> Result<ExportKind> {
        ALL_EXPORT_KINDS.iter().copied().find(|k| k.name() == s).ok_or_else(|| {
            let names: Vec<&str> = ALL_EXPORT_KINDS.iter().map(|k| k.name()).collect();
            Error::Config(format!("unknown export kind {s:?}; expected one of {}", names.join(", ")))
        })
    }
}

impl fmt::Display for ExportKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LongRow {
    pub epoch: usize,
    pub metric: String,
    pub value: f64,
    pub variant: String,
    pub seed: u64,
}

/// Runlog columns each kind exports, under the metric names the rows carry.
/// Binarity uses the bare score names (llh/sigma/peaks); accuracy is split
/// into train/test series.
fn kind_columns(kind: ExportKind) -> &'static [(&'static str, &'static str)] {
    match kind {
        ExportKind::NcMetrics => &[
            ("sigma_w_trace", "sigma_w_trace"),
            ("nc1", "nc1"),
            ("separation_ratio", "separation_ratio"),
            ("mean_radius", "mean_radius"),
            ("norm_cov", "norm_cov"),
            ("entropy_per_dim", "entropy_per_dim"),
            ("nc2_equinorm", "nc2_equinorm"),
            ("nc2_equiangularity_dev", "nc2_equiangularity_dev"),
            ("nc2_cos_std", "nc2_cos_std"),
        ],
        ExportKind::Binarity => {
            &[("binarity_llh", "llh"), ("binarity_sigma", "sigma"), ("binarity_peaks", "peaks")]
        }
        ExportKind::Losses => {
            &[("loss_ce", "loss_ce"), ("loss_l2", "loss_l2"), ("loss_aux", "loss_aux")]
        }
        ExportKind::Robustness => &[
            ("robustness_mean", "robustness_mean"),
            ("robustness_median", "robustness_median"),
            ("robustness_converged_frac", "robustness_converged_frac"),
        ],
        ExportKind::Accuracy => &[],
    }
}

/// Flattens one run's log into long rows for a kind. Blank (`NA`) cells
/// produce no row: the long format carries observations, not sentinels.
pub fn runlog_long_rows(log: &RunLog, kind: ExportKind, variant: &str, seed: u64) -> Vec<LongRow> {
    let mut rows = Vec::new();
    let mut push = |epoch: usize, metric: &str, value: f64| {
        rows.push(LongRow {
            epoch,
            metric: metric.to_string(),
            value,
            variant: variant.to_string(),
            seed,
        });
    };
    match kind {
        ExportKind::Accuracy => {
            for r in &log.rows {
                let name = match r.split {
                    Split::Train => "train_accuracy",
                    Split::Test => "test_accuracy",
                };
                push(r.epoch, name, r.accuracy);
            }
        }
        _ => {
            // Metric columns live on train rows; robustness on test rows.
            let want_split =
                if kind == ExportKind::Robustness { Split::Test } else { Split::Train };
            for r in log.rows.iter().filter(|r| r.split == want_split) {
                for (column, metric) in kind_columns(kind) {
                    if let Some(v) = r.value_of(column) {
                        push(r.epoch, metric, v);
                    }
                }
            }
        }
    }
    rows
}

pub fn long_rows_to_csv(rows: &[LongRow]) -> String {
    let mut s = String::from(LONG_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&format!("{},{},{},{},{}\n", r.epoch, r.metric, r.value, r.variant, r.seed));
    }
    s
}

pub fn long_rows_from_csv(text: &str) -> Result<Vec<LongRow>> {
    let bad = |what: String| Error::Format { offset: 0, message: what };
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| bad("long csv: empty file".into()))?;
    if header != LONG_HEADER {
        return Err(bad(format!("long csv: unexpected header {header:?}")));
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 5 {
            return Err(bad(format!("long csv line {lineno}: expected 5 fields, got {}", parts.len())));
        }
        let epoch: usize = parts[0]
            .parse()
            .map_err(|_| bad(format!("long csv line {lineno}: bad epoch {:?}", parts[0])))?;
        let value: f64 = parts[2]
            .parse()
            .map_err(|_| bad(format!("long csv line {lineno}: bad value {:?}", parts[2])))?;
        let seed: u64 = parts[4]
            .parse()
            .map_err(|_| bad(format!("long csv line {lineno}: bad seed {:?}", parts[4])))?;
        rows.push(LongRow {
            epoch,
            metric: parts[1].to_string(),
            value,
            variant: parts[3].to_string(),
            seed,
        });
    }
    Ok(rows)
}

/// Metrics the suite summary aggregates, in output order: the collapse
/// table's columns (separation ratio, Σ_W trace, norm CoV, entropy per
/// dim), the robustness/accuracy pair, then the shared-shell radius as a
/// trailing diagnostic.
pub const SUMMARY_METRICS: [&str; 8] = [
    "separation_ratio",
    "sigma_w_trace",
    "norm_cov",
    "entropy_per_dim",
    "robustness_mean",
    "robustness_median",
    "test_accuracy",
    "mean_radius",
];

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub variant: String,
    pub runs: usize,
    /// Aligned with `SUMMARY_METRICS`; `None` when no run reported it.
    pub stats: Vec<Option<(f64, f64)>>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SummaryTable {
    pub rows: Vec<SummaryRow>,
}

impl SummaryTable {
    pub fn to_csv_string(&self) -> String {
        let mut s = String::from("variant,runs");
        for m in SUMMARY_METRICS {
            s.push_str(&format!(",{m}_mean,{m}_std"));
        }
        s.push('\n');
        for row in &self.rows {
            s.push_str(&format!("{},{}", row.variant, row.runs));
            for st in &row.stats {
                match st {
                    Some((mean, std)) => s.push_str(&format!(",{mean},{std}")),
                    None => s.push_str(",NA,NA"),
                }
            }
            s.push('\n');
        }
        s
    }
}

/// Reduces long rows to a per-variant summary: for each (variant, seed,
/// metric) the value at the greatest epoch counts as that run's result, and
/// runs aggregate to mean ± population std. Variants keep first-appearance
/// order, seeds make a variant's run count.
pub fn summarize_long(rows: &[LongRow]) -> SummaryTable {
    let mut variants: Vec<String> = Vec::new();
    for r in rows {
        if !variants.contains(&r.variant) {
            variants.push(r.variant.clone());
        }
    }

    let mut out = Vec::new();
    for variant in variants {
        let mut seeds: Vec<u64> = Vec::new();
        for r in rows.iter().filter(|r| r.variant == variant) {
            if !seeds.contains(&r.seed) {
                seeds.push(r.seed);
            }
        }
        let mut stats = Vec::with_capacity(SUMMARY_METRICS.len());
        for metric in SUMMARY_METRICS {
            let mut finals = Vec::new();
            for &seed in &seeds {
                let mut best: Option<(usize, f64)> = None;
                for r in rows.iter().filter(|r| {
                    r.variant == variant && r.seed == seed && r.metric == metric
                }) {
                    if best.is_none_or(|(e, _)| r.epoch >= e) {
                        best = Some((r.epoch, r.value));
                    }
                }
                if let Some((_, v)) = best {
                    finals.push(v);
                }
            }
            stats.push(mean_and_std(&finals));
        }
        out.push(SummaryRow { variant, runs: seeds.len(), stats });
    }
    SummaryTable { rows: out }
}

fn mean_and_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Some((mean, var.sqrt()))
}
