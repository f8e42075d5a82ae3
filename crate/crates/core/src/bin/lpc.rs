//! Command-line front end: training runs, ablation suites, standalone
//! attacks and metric passes, the frozen-classifier descent demo, and
//! runlog-to-plot-series export.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use lpc_core::error::{Error, Result};
use lpc_core::harness::experiment::build_datasets;
use lpc_core::harness::suite::suite_base_config;
use lpc_core::harness::{
    ablation_suite, load_config, run_experiment, runlog_long_rows, ExportKind, RunLog,
    SuiteOptions, SuitePreset,
};
use lpc_core::metrics::{binarity_scores, collapse_report, read_latents, LatentBatch};
use lpc_core::models::load_checkpoint;
use lpc_core::robustness::{robustness_sweep, DeepfoolParams, RobustnessStats};
use lpc_core::theory::{
    simplex_vertices, simulate_collapse, vertex_cloud, write_trajectory_csv, FrozenClassifier,
};

#[derive(Parser)]
#[command(name = "lpc", version, about = "Latent point collapse laboratory")]
struct Cli {
    /// Seed override: replaces the config seed (train), seeds the point
    /// cloud (theory), or stamps the seed column (export).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output override: the run directory (train), the suite directory
    /// (suite), the demo directory (theory), or the destination file
    /// (attack/metrics/export, which print to stdout by default).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model from a config file and write its run artifacts.
    Train {
        /// Path to a "key = value" experiment config.
        config: PathBuf,
    },

    /// Run an ablation preset (full, quick, correlation) across seeds.
    Suite {
        preset: String,
        /// Comma-separated run seeds.
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        seeds: Vec<u64>,
        /// Cross each variant with four geometric learning rates.
        #[arg(long)]
        lr_sweep: bool,
    },

    /// DeepFool sweep of a trained checkpoint over a point set.
    Attack {
        checkpoint: PathBuf,
        /// An .lpcz point file attacked directly, or an experiment config
        /// whose held-out split is rebuilt and attacked.
        dataset: PathBuf,
        #[arg(long, default_value_t = 50)]
        max_iter: usize,
        #[arg(long, default_value_t = 0.02)]
        overshoot: f64,
        /// Attack only the first N points.
        #[arg(long)]
        max_samples: Option<usize>,
    },

    /// Collapse and binarity battery over a stored latent batch.
    Metrics {
        /// An .lpcz latent file.
        latent_file: PathBuf,
        /// Neighbour count for the entropy estimator.
        #[arg(long, default_value_t = 20)]
        knn_k: usize,
    },

    /// Latent descent against a frozen simplex classifier, one run per
    /// penalty weight; writes shell statistics and full trajectories.
    Theory {
        /// Comma-separated penalty weights.
        #[arg(long, value_delimiter = ',', default_value = "0.01,0.1,1")]
        gammas: Vec<f64>,
        #[arg(long, default_value_t = 3)]
        classes: usize,
        /// Latent dimension; defaults to classes - 1.
        #[arg(long)]
        dim: Option<usize>,
        #[arg(long, default_value_t = 20)]
        per_class: usize,
        #[arg(long, default_value_t = 200)]
        steps: usize,
        #[arg(long, default_value_t = 0.05)]
        step_size: f64,
        /// Starting shell radius of the point cloud.
        #[arg(long, default_value_t = 2.0)]
        radius: f64,
        /// Noise scale around each class direction.
        #[arg(long, default_value_t = 0.25)]
        sigma: f64,
        /// Weight scale of the frozen classifier.
        #[arg(long, default_value_t = 2.0)]
        scale: f64,
    },

    /// Reshape a runlog into a tidy long-format series for plotting.
    Export {
        runlog: PathBuf,
        /// One of nc_metrics, binarity, losses, accuracy, robustness.
        #[arg(long)]
        kind: String,
        /// Variant stamp; defaults to the run's effective-config echo.
        #[arg(long)]
        variant: Option<String>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config } => train(&config, cli.seed, cli.out),
        Command::Suite { preset, seeds, lr_sweep } => suite(&preset, seeds, lr_sweep, cli.out),
        Command::Attack { checkpoint, dataset, max_iter, overshoot, max_samples } => {
            attack(&checkpoint, &dataset, max_iter, overshoot, max_samples, cli.out)
        }
        Command::Metrics { latent_file, knn_k } => metrics(&latent_file, knn_k, cli.out),
        Command::Theory {
            gammas,
            classes,
            dim,
            per_class,
            steps,
            step_size,
            radius,
            sigma,
            scale,
        } => theory(
            &gammas, classes, dim, per_class, steps, step_size, radius, sigma, scale, cli.seed,
            cli.out,
        ),
        Command::Export { runlog, kind, variant } => {
            export(&runlog, &kind, variant, cli.seed, cli.out)
        }
    }
}

fn train(config: &Path, seed: Option<u64>, out: Option<PathBuf>) -> Result<()> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(dir) = out {
        cfg.output_dir = dir.display().to_string();
    }
    let outputs = run_experiment(&cfg)?;
    println!("run complete: {}", outputs.out_dir.display());
    println!("final_train_accuracy = {}", outputs.final_train_accuracy);
    println!("final_test_accuracy = {}", outputs.final_test_accuracy);
    println!("mean_latent_radius = {}", outputs.mean_radius);
    println!("sigma_w_trace = {}", outputs.final_report.sigma_w_trace);
    match outputs.tpt_epoch {
        Some(e) => println!("tpt_epoch = {e}"),
        None => println!("tpt_epoch = NA"),
    }
    Ok(())
}

fn suite(preset: &str, seeds: Vec<u64>, lr_sweep: bool, out: Option<PathBuf>) -> Result<()> {
    let preset = SuitePreset::parse(preset)?;
    let out_dir = out.unwrap_or_else(|| PathBuf::from("suite-out"));
    let opts = SuiteOptions { seeds, out_dir, lr_sweep, base: suite_base_config() };
    let outcome = ablation_suite(preset, &opts)?;
    for run in &outcome.runs {
        let status = match &run.error {
            None => "ok".to_string(),
            Some(e) => format!("failed: {e}"),
        };
        println!("{} seed {}: {status}", run.label, run.seed);
    }
    println!("summary: {}", outcome.out_dir.join("suite_summary.csv").display());
    match outcome.pearson_separation_robustness {
        Some(r) => println!("pearson_r_separation_vs_robustness = {r}"),
        None => println!("pearson_r_separation_vs_robustness = NA"),
    }
    Ok(())
}

fn attack(
    checkpoint: &Path,
    dataset: &Path,
    max_iter: usize,
    overshoot: f64,
    max_samples: Option<usize>,
    out: Option<PathBuf>,
) -> Result<()> {
    let model = load_checkpoint(checkpoint)?;
    let points = if dataset.extension().is_some_and(|e| e == "lpcz") {
        read_latents(dataset)?.z
    } else {
        let cfg = load_config(dataset)?;
        let (_, test) = build_datasets(&cfg)?;
        test.x
    };
    if points.cols() != model.spec.input_dim {
        return Err(Error::InvalidInput(format!(
            "attack: {}-dimensional points cannot feed a model with input dimension {}",
            points.cols(),
            model.spec.input_dim
        )));
    }
    let params = DeepfoolParams { max_iter, overshoot };
    let stats = robustness_sweep(&model, &points, &params, max_samples)?;
    emit(out.as_deref(), &robustness_text(&stats))
}

fn robustness_text(stats: &RobustnessStats) -> String {
    let fmt = |v: Option<f64>| v.map_or("NA".to_string(), |x| x.to_string());
    format!(
        "samples = {}\nconverged = {}\nconverged_frac = {}\nmean_rel_norm = {}\n\
         median_rel_norm = {}\nmean_rel_norm_all = {}\n",
        stats.samples,
        stats.converged,
        stats.converged_frac,
        fmt(stats.mean_rel_norm),
        fmt(stats.median_rel_norm),
        stats.mean_rel_norm_all,
    )
}

fn metrics(latent_file: &Path, knn_k: usize, out: Option<PathBuf>) -> Result<()> {
    let batch = read_latents(latent_file)?;
    let report = collapse_report(&batch, knn_k)?;
    let binarity = binarity_scores(&batch)?;
    let text = metrics_text(&batch, knn_k, &report, &binarity);
    emit(out.as_deref(), &text)
}

fn metrics_text(
    batch: &LatentBatch,
    knn_k: usize,
    report: &lpc_core::metrics::CollapseReport,
    binarity: &lpc_core::metrics::BinarityReport,
) -> String {
    let mut s = String::new();
    s.push_str(&format!(
        "samples = {}\ndim = {}\nclasses = {}\n",
        batch.len(),
        batch.dim(),
        batch.classes
    ));
    s.push_str(&format!("sigma_w_trace = {}\n", report.sigma_w_trace));
    s.push_str(&format!("nc1 = {}\n", report.nc1));
    s.push_str(&format!("separation_ratio = {}\n", report.separation_ratio));
    s.push_str(&format!("norm_cov = {}\n", report.norm_cov));
    s.push_str(&format!("entropy_per_dim = {}\n", report.entropy_per_dim));
    if report.entropy_k != knn_k {
        s.push_str(&format!("entropy_k = {} (clamped from {knn_k})\n", report.entropy_k));
    }
    s.push_str(&format!("nc2_equinorm_cov = {}\n", report.nc2.equinorm_cov));
    s.push_str(&format!("nc2_equiangularity_dev = {}\n", report.nc2.equiangularity_dev));
    s.push_str(&format!("nc2_cos_std = {}\n", report.nc2.cos_std));
    s.push_str(&format!("binarity_llh = {}\n", binarity.mean_loglik));
    s.push_str(&format!("binarity_sigma = {}\n", binarity.mean_sigma));
    s.push_str(&format!("binarity_peaks = {}\n", binarity.mean_peak_distance));
    s
}

#[allow(clippy::too_many_arguments)]
fn theory(
    gammas: &[f64],
    classes: usize,
    dim: Option<usize>,
    per_class: usize,
    steps: usize,
    step_size: f64,
    radius: f64,
    sigma: f64,
    scale: f64,
    seed: Option<u64>,
    out: Option<PathBuf>,
) -> Result<()> {
    let dim = dim.unwrap_or(classes.saturating_sub(1));
    let w = simplex_vertices(classes, dim)?.scale(scale);
    let clf = FrozenClassifier::new(w, None)?;
    let cloud = vertex_cloud(&clf, per_class, radius, sigma, seed.unwrap_or(7))?;
    let runs = simulate_collapse(&clf, &cloud, gammas, steps, step_size)?;

    let out_dir = out.unwrap_or_else(|| PathBuf::from("theory-out"));
    fs::create_dir_all(&out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;

    let mut shells = String::from("gamma,class,count,mean_radius,radial_spread,max_diameter\n");
    for run in &runs {
        for s in &run.shells {
            shells.push_str(&format!(
                "{},{},{},{},{},{}\n",
                run.gamma, s.class, s.count, s.mean_radius, s.radial_spread, s.max_diameter
            ));
        }
    }
    let shells_path = out_dir.join("theory_shells.csv");
    fs::write(&shells_path, &shells).map_err(|e| Error::io(shells_path.display().to_string(), e))?;
    write_trajectory_csv(&out_dir.join("theory_trajectory.csv"), &runs, &cloud.labels)?;

    print!("{shells}");
    println!("wrote {}", shells_path.display());
    println!("wrote {}", out_dir.join("theory_trajectory.csv").display());
    Ok(())
}

fn export(
    runlog: &Path,
    kind: &str,
    variant: Option<String>,
    seed: Option<u64>,
    out: Option<PathBuf>,
) -> Result<()> {
    let kind = ExportKind::parse(kind)?;
    let log = RunLog::read_csv(runlog)?;

    // The variant/seed stamps come from flags when given, otherwise from
    // the effective-config echo sitting next to the runlog.
    let sibling = runlog.parent().map(|d| d.join("config_effective.cfg"));
    let echoed = match (&variant, seed, &sibling) {
        (Some(_), Some(_), _) => None,
        (_, _, Some(path)) if path.is_file() => Some(load_config(path)?),
        _ => None,
    };
    let variant_stamp = match (variant, &echoed) {
        (Some(v), _) => lpc_core::models::Variant::parse(&v)?.name().to_string(),
        (None, Some(cfg)) => cfg.variant.name().to_string(),
        (None, None) => {
            return Err(Error::Config(
                "export: pass --variant; no config_effective.cfg next to the runlog".into(),
            ))
        }
    };
    let seed_stamp = match (seed, &echoed) {
        (Some(s), _) => s,
        (None, Some(cfg)) => cfg.seed,
        (None, None) => 0,
    };

    let rows = runlog_long_rows(&log, kind, &variant_stamp, seed_stamp);
    emit(out.as_deref(), &lpc_core::harness::export::long_rows_to_csv(&rows))
}

/// Prints to stdout, or writes to `path` when `--out` was given.
fn emit(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
            }
            fs::write(p, text).map_err(|e| Error::io(p.display().to_string(), e))?;
            println!("wrote {}", p.display());
        }
        None => print!("{text}"),
    }
    Ok(())
}
