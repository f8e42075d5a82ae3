//! Per-epoch training log and its CSV form.
//!
//! One row per (epoch, split). Train rows exist for every epoch; test rows
//! only for epochs where metrics were computed. Columns are fixed; values
//! that were not computed on a row carry the literal sentinel `NA`, so every
//! row is complete. Floats are written with `{}` (shortest round-trip), so
//! reading a file back reproduces the values bit for bit.

use std::fmt;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const NA: &str = "NA";

pub const RUNLOG_COLUMNS: [&str; 23] = [
    "epoch",
    "split",
    "accuracy",
    "loss_ce",
    "loss_l2",
    "loss_aux",
    "gamma",
    "sigma_w_trace",
    "nc1",
    "separation_ratio",
    "mean_radius",
    "norm_cov",
    "entropy_per_dim",
    "nc2_equinorm",
    "nc2_equiangularity_dev",
    "nc2_cos_std",
    "binarity_llh",
    "binarity_sigma",
    "binarity_peaks",
    "robustness_mean",
    "robustness_median",
    "robustness_converged_frac",
    "tpt_flag",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Format {
                offset: 0,
                message: format!("split must be 'train' or 'test', got {other:?}"),
            }),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One logged row. `None` serializes as the `NA` sentinel.
#[derive(Debug, Clone, PartialEq)]
pub struct RunLogRow {
    pub epoch: usize,
    pub split: Split,
    pub accuracy: f64,
    pub loss_ce: Option<f64>,
    pub loss_l2: Option<f64>,
    pub loss_aux: Option<f64>,
    pub gamma: f64,
    pub sigma_w_trace: Option<f64>,
    pub nc1: Option<f64>,
    pub separation_ratio: Option<f64>,
    pub mean_radius: Option<f64>,
    pub norm_cov: Option<f64>,
    pub entropy_per_dim: Option<f64>,
    pub nc2_equinorm: Option<f64>,
    pub nc2_equiangularity_dev: Option<f64>,
    pub nc2_cos_std: Option<f64>,
    pub binarity_llh: Option<f64>,
    pub binarity_sigma: Option<f64>,
    pub binarity_peaks: Option<f64>,
    pub robustness_mean: Option<f64>,
    pub robustness_median: Option<f64>,
    pub robustness_converged_frac: Option<f64>,
    pub tpt_flag: bool,
}

impl RunLogRow {
    /// A row with the always-present fields set and every metric blank.
    pub fn new(epoch: usize, split: Split, accuracy: f64, gamma: f64, tpt_flag: bool) -> Self {
        RunLogRow {
            epoch,
            split,
            accuracy,
            loss_ce: None,
            loss_l2: None,
            loss_aux: None,
            gamma,
            sigma_w_trace: None,
            nc1: None,
            separation_ratio: None,
            mean_radius: None,
            norm_cov: None,
            entropy_per_dim: None,
            nc2_equinorm: None,
            nc2_equiangularity_dev: None,
            nc2_cos_std: None,
            binarity_llh: None,
            binarity_sigma: None,
            binarity_peaks: None,
            robustness_mean: None,
            robustness_median: None,
            robustness_converged_frac: None,
            tpt_flag,
        }
    }

    fn optional_fields(&self) -> [Option<f64>; 18] {
        [
            self.loss_ce,
            self.loss_l2,
            self.loss_aux,
            self.sigma_w_trace,
            self.nc1,
            self.separation_ratio,
            self.mean_radius,
            self.norm_cov,
            self.entropy_per_dim,
            self.nc2_equinorm,
            self.nc2_equiangularity_dev,
            self.nc2_cos_std,
            self.binarity_llh,
            self.binarity_sigma,
            self.binarity_peaks,
            self.robustness_mean,
            self.robustness_median,
            self.robustness_converged_frac,
        ]
    }

    /// Named access for the export layer; `None` for unknown columns.
    pub fn value_of(&self, column: &str) -> Option<f64> {
        match column {
            "accuracy" => Some(self.accuracy),
            "loss_ce" => self.loss_ce,
            "loss_l2" => self.loss_l2,
            "loss_aux" => self.loss_aux,
            "gamma" => Some(self.gamma),
            "sigma_w_trace" => self.sigma_w_trace,
            "nc1" => self.nc1,
            "separation_ratio" => self.separation_ratio,
            "mean_radius" => self.mean_radius,
            "norm_cov" => self.norm_cov,
            "entropy_per_dim" => self.entropy_per_dim,
            "nc2_equinorm" => self.nc2_equinorm,
            "nc2_equiangularity_dev" => self.nc2_equiangularity_dev,
            "nc2_cos_std" => self.nc2_cos_std,
            "binarity_llh" => self.binarity_llh,
            "binarity_sigma" => self.binarity_sigma,
            "binarity_peaks" => self.binarity_peaks,
            "robustness_mean" => self.robustness_mean,
            "robustness_median" => self.robustness_median,
            "robustness_converged_frac" => self.robustness_converged_frac,
            _ => None,
        }
    }

    fn check_finite(&self) -> Result<()> {
        if !self.accuracy.is_finite() || !self.gamma.is_finite() {
            return Err(Error::Numeric(format!(
                "runlog: non-finite accuracy/gamma at epoch {} ({})",
                self.epoch, self.split
            )));
        }
        for (v, name) in self.optional_fields().iter().zip(OPTIONAL_NAMES) {
            if let Some(x) = v {
                if !x.is_finite() {
                    return Err(Error::Numeric(format!(
                        "runlog: non-finite {name} at epoch {} ({})",
                        self.epoch, self.split
                    )));
                }
            }
        }
        Ok(())
    }

    fn to_csv_line(&self) -> String {
        let opt = |v: Option<f64>| match v {
            Some(x) => x.to_string(),
            None => NA.to_string(),
        };
        let f = self.optional_fields();
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.split,
            self.accuracy,
            opt(f[0]),
            opt(f[1]),
            opt(f[2]),
            self.gamma,
            opt(f[3]),
            opt(f[4]),
            opt(f[5]),
            opt(f[6]),
            opt(f[7]),
            opt(f[8]),
            opt(f[9]),
            opt(f[10]),
            opt(f[11]),
            opt(f[12]),
            opt(f[13]),
            opt(f[14]),
            opt(f[15]),
            opt(f[16]),
            opt(f[17]),
            if self.tpt_flag { 1 } else { 0 },
        )
    }
}

/// Column names matching `optional_fields` order.
const OPTIONAL_NAMES: [&str; 18] = [
    "loss_ce",
    "loss_l2",
    "loss_aux",
    "sigma_w_trace",
    "nc1",
    "separation_ratio",
    "mean_radius",
    "norm_cov",
    "entropy_per_dim",
    "nc2_equinorm",
    "nc2_equiangularity_dev",
    "nc2_cos_std",
    "binarity_llh",
    "binarity_sigma",
    "binarity_peaks",
    "robustness_mean",
    "robustness_median",
    "robustness_converged_frac",
];

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunLog {
    pub rows: Vec<RunLogRow>,
}

impl RunLog {
    pub fn header() -> String {
        RUNLOG_COLUMNS.join(",")
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut s = Self::header();
        s.push('\n');
        for row in &self.rows {
            row.check_finite()?;
            s.push_str(&row.to_csv_line());
            s.push('\n');
        }
        Ok(s)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let text = self.to_csv_string()?;
        fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn read_csv(path: &Path) -> Result<RunLog> {
        let text =
            fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_csv_str(&text)
    }

    pub fn from_csv_str(text: &str) -> Result<RunLog> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Format {
            offset: 0,
            message: "runlog: empty file".into(),
        })?;
        if header != Self::header() {
            return Err(Error::Format {
                offset: 0,
                message: format!("runlog: unexpected header {header:?}"),
            });
        }
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            let lineno = i + 2;
            if line.is_empty() {
                continue;
            }
            rows.push(parse_row(line, lineno)?);
        }
        let log = RunLog { rows };
        log.validate()?;
        Ok(log)
    }

    /// Structural invariants: per-split epochs strictly increase, the TPT
    /// flag never clears once set, accuracy stays in [0, 1].
    pub fn validate(&self) -> Result<()> {
        let bad = |what: String| Error::Format { offset: 0, message: what };
        let mut last_epoch: [Option<usize>; 2] = [None, None];
        let mut tpt_seen = false;
        for row in &self.rows {
            let slot = match row.split {
                Split::Train => 0,
                Split::Test => 1,
            };
            if let Some(prev) = last_epoch[slot] {
                if row.epoch <= prev {
                    return Err(bad(format!(
                        "runlog: {} epochs must strictly increase ({} after {prev})",
                        row.split, row.epoch
                    )));
                }
            }
            last_epoch[slot] = Some(row.epoch);
            if tpt_seen && !row.tpt_flag {
                return Err(bad(format!(
                    "runlog: tpt_flag cleared at epoch {} ({})",
                    row.epoch, row.split
                )));
            }
            tpt_seen |= row.tpt_flag;
            if !(0.0..=1.0).contains(&row.accuracy) {
                return Err(bad(format!(
                    "runlog: accuracy {} out of [0,1] at epoch {}",
                    row.accuracy, row.epoch
                )));
            }
        }
        Ok(())
    }

    pub fn last_row(&self, split: Split) -> Option<&RunLogRow> {
        self.rows.iter().rev().find(|r| r.split == split)
    }
}

fn parse_row(line: &str, lineno: usize) -> Result<RunLogRow> {
    let bad = |what: String| Error::Format { offset: 0, message: what };
    let parts: Vec<&str> = line.split(',').collect();
    if parts.len() != RUNLOG_COLUMNS.len() {
        return Err(bad(format!(
            "runlog line {lineno}: expected {} fields, got {}",
            RUNLOG_COLUMNS.len(),
            parts.len()
        )));
    }
    let f64_at = |i: usize| -> Result<f64> {
        let v: f64 = parts[i]
            .parse()
            .map_err(|_| bad(format!("runlog line {lineno}: bad number {:?} in {}", parts[i], RUNLOG_COLUMNS[i])))?;
        if !v.is_finite() {
            return Err(bad(format!(
                "runlog line {lineno}: non-finite {} value",
                RUNLOG_COLUMNS[i]
            )));
        }
        Ok(v)
    };
    let opt_at = |i: usize| -> Result<Option<f64>> {
        if parts[i] == NA {
            Ok(None)
        } else {
            f64_at(i).map(Some)
        }
    };
    let epoch: usize = parts[0]
        .parse()
        .map_err(|_| bad(format!("runlog line {lineno}: bad epoch {:?}", parts[0])))?;
    let split = Split::parse(parts[1])
        .map_err(|_| bad(format!("runlog line {lineno}: bad split {:?}", parts[1])))?;
    let tpt_flag = match parts[22] {
        "0" => false,
        "1" => true,
        other => return Err(bad(format!("runlog line {lineno}: tpt_flag must be 0 or 1, got {other:?}"))),
    };
    Ok(RunLogRow {
        epoch,
        split,
        accuracy: f64_at(2)?,
        loss_ce: opt_at(3)?,
        loss_l2: opt_at(4)?,
        loss_aux: opt_at(5)?,
        gamma: f64_at(6)?,
        sigma_w_trace: opt_at(7)?,
        nc1: opt_at(8)?,
        separation_ratio: opt_at(9)?,
        mean_radius: opt_at(10)?,
        norm_cov: opt_at(11)?,
        entropy_per_dim: opt_at(12)?,
        nc2_equinorm: opt_at(13)?,
        nc2_equiangularity_dev: opt_at(14)?,
        nc2_cos_std: opt_at(15)?,
        binarity_llh: opt_at(16)?,
        binarity_sigma: opt_at(17)?,
        binarity_peaks: opt_at(18)?,
        robustness_mean: opt_at(19)?,
        robustness_median: opt_at(20)?,
        robustness_converged_frac: opt_at(21)?,
        tpt_flag,
    })
}
