//! Experiment plumbing: config files, the training loop, run logs, ablation
//! suites, and plot exports.

pub mod config;
pub mod experiment;
pub mod export;
pub mod runlog;
pub mod suite;

pub use config::{effective_text, load_config, parse_config_str, ExperimentConfig};
pub use experiment::{run_experiment, RunOutputs};
pub use export::{runlog_long_rows, summarize_long, ExportKind};
pub use runlog::{RunLog, RunLogRow, Split};
pub use suite::{ablation_suite, SuiteOptions, SuitePreset};
