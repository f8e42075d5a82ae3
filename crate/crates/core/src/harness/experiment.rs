//! One training run: the γ-ramped loop, metric cadence, TPT detection, and
//! all on-disk artifacts (config echo, checkpoint, run log, latent export).

use std::fs;
use std::path::{Path, PathBuf};

use crate::datasets::{self, BlobSpec, Dataset, Standardizer};
use crate::error::{Error, Result};
use crate::losses;
use crate::metrics::{self, BinarityReport, CollapseReport, LatentBatch};
use crate::models::{
    build_model, latents_of, save_checkpoint, ArchitectureSpec, LossTerms, ModelInstance,
};
use crate::optim::{adamw_step_grouped, lr_halving_factor, AdamWParams, AdamWState};
use crate::rng::Rng;
use crate::robustness::{robustness_sweep, DeepfoolParams, RobustnessStats};
use crate::tensor::Tensor2D;

use super::config::{write_effective_config, DatasetConfig, ExperimentConfig};
use super::runlog::{RunLog, RunLogRow, Split};

/// Train accuracy at which the terminal phase of training begins.
pub const TPT_ACCURACY: f64 = 0.999;

/// Tag separating the held-out split's sampling stream from the train split.
const TEST_SEED_TAG: u64 = 0x7e57_5eed;

/// Epochs on which the full metric battery runs: every `cadence`-th epoch
/// (1-based) and always the last one.
pub fn is_metrics_epoch(epoch: usize, cadence: usize, epochs: usize) -> bool {
    (epoch + 1).is_multiple_of(cadence) || epoch + 1 == epochs
}

/// Everything a finished run hands back in memory; the same facts are on
/// disk under `out_dir` (runlog.csv, model.ckpt, latents.lpcz,
/// config_effective.cfg).
#[derive(Debug, Clone)]
pub struct RunOutputs {
    pub out_dir: PathBuf,
    pub runlog: RunLog,
    pub tpt_epoch: Option<usize>,
    pub final_train_accuracy: f64,
    pub final_test_accuracy: f64,
    /// Mean train-latent norm at the final epoch — the shared-shell radius
    /// the latents settle on under collapse.
    pub mean_radius: f64,
    pub final_report: CollapseReport,
    pub final_binarity: BinarityReport,
    pub final_robustness: RobustnessStats,
}

/// Builds the train and held-out splits a config describes. Synthetic test
/// splits draw from a derived seed so they never alias the train split; an
/// idx config without test files reuses the training files (collapse-only
/// runs), which makes the test columns read the train split.
pub fn build_datasets(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    let ds_seed = cfg.dataset_seed();
    let mut test_rng = Rng::derive(ds_seed, TEST_SEED_TAG);
    let (mut train, mut test) = match &cfg.dataset {
        DatasetConfig::Blobs {
            classes,
            per_class,
            test_per_class,
            dim,
            sigma,
            center_radius,
            ..
        } => {
            let base = BlobSpec {
                classes: *classes,
                per_class: *per_class,
                dim: *dim,
                sigma: *sigma,
                center_radius: *center_radius,
                seed: ds_seed,
            };
            let train = datasets::gaussian_blobs(&base)?;
            let test = datasets::gaussian_blobs(&BlobSpec {
                per_class: *test_per_class,
                seed: test_rng.next_u64(),
                ..base
            })?;
            (train, test)
        }
        DatasetConfig::Rings { classes, per_class, test_per_class, sigma, .. } => {
            let train = datasets::concentric_rings(*classes, *per_class, *sigma, ds_seed)?;
            let test =
                datasets::concentric_rings(*classes, *test_per_class, *sigma, test_rng.next_u64())?;
            (train, test)
        }
        DatasetConfig::Idx { images, labels, test_images, test_labels, .. } => {
            let train = datasets::load_idx(Path::new(images), Path::new(labels))?;
            let test = match (test_images, test_labels) {
                (Some(ti), Some(tl)) => datasets::load_idx(Path::new(ti), Path::new(tl))?,
                _ => train.clone(),
            };
            (train, test)
        }
    };

    if test.classes > train.classes {
        return Err(Error::InvalidInput(format!(
            "test labels reach class {} but training data has {} classes",
            test.classes - 1,
            train.classes
        )));
    }
    test.classes = train.classes;

    if cfg.dataset.standardize() {
        let st = Standardizer::fit(&train.x)?;
        train.x = st.apply(&train.x)?;
        test.x = st.apply(&test.x)?;
    }
    Ok((train, test))
}

/// Learning rate per parameter slot under a halving factor. The final
/// classifier always keeps the base rate; every other slot scales by
/// `factor` (a power of two, so the scaling is exact).
pub fn per_slot_learning_rates(
    slots: usize,
    classifier_slot: usize,
    base_lr: f64,
    factor: f64,
) -> Vec<f64> {
    (0..slots)
        .map(|slot| if slot == classifier_slot { base_lr } else { base_lr * factor })
        .collect()
}

fn mean_row_norm(x: &Tensor2D) -> f64 {
    if x.rows() == 0 {
        return 0.0;
    }
    let sum: f64 = (0..x.rows())
        .map(|i| x.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
        .sum();
    sum / x.rows() as f64
}

struct Finals {
    tpt_epoch: Option<usize>,
    train_accuracy: f64,
    test_accuracy: f64,
    mean_radius: f64,
    report: CollapseReport,
    binarity: BinarityReport,
    robustness: RobustnessStats,
}

/// Runs the configured experiment to completion. On any failure the partial
/// run log and a diagnostic (`abort.txt`) are flushed to the output
/// directory and the checkpoint on disk is the last good one.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutputs> {
    let out_dir = PathBuf::from(&cfg.output_dir);
    fs::create_dir_all(&out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    write_effective_config(cfg, &out_dir)?;

    let (train, test) = build_datasets(cfg)?;
    let spec = ArchitectureSpec::new(
        cfg.variant,
        train.dim(),
        cfg.backbone.clone(),
        cfg.pen_dim,
        train.classes,
    )?;
    let mut model = build_model(&spec, cfg.seed)?;
    let ckpt_path = out_dir.join("model.ckpt");
    save_checkpoint(&model, &ckpt_path)?;

    let mut log = RunLog::default();
    match run_epochs(cfg, &train, &test, &mut model, &mut log, &ckpt_path, &out_dir) {
        Ok(fin) => {
            log.write_csv(&out_dir.join("runlog.csv"))?;
            Ok(RunOutputs {
                out_dir,
                runlog: log,
                tpt_epoch: fin.tpt_epoch,
                final_train_accuracy: fin.train_accuracy,
                final_test_accuracy: fin.test_accuracy,
                mean_radius: fin.mean_radius,
                final_report: fin.report,
                final_binarity: fin.binarity,
                final_robustness: fin.robustness,
            })
        }
        Err(e) => {
            // Keep the evidence; these writes are best-effort on a path
            // that already failed.
            let _ = log.write_csv(&out_dir.join("runlog.csv"));
            let _ = fs::write(out_dir.join("abort.txt"), format!("{e}\n"));
            Err(e)
        }
    }
}

fn run_epochs(
    cfg: &ExperimentConfig,
    train: &Dataset,
    test: &Dataset,
    model: &mut ModelInstance,
    log: &mut RunLog,
    ckpt_path: &Path,
    out_dir: &Path,
) -> Result<Finals> {
    let epochs = cfg.train.epochs;
    let n = train.len();
    let batch_size = cfg.train.batch_size.min(n);
    let hp = AdamWParams {
        lr: cfg.train.learning_rate,
        weight_decay: cfg.train.weight_decay,
        ..AdamWParams::default()
    };
    let mut state = AdamWState::new(&model.params);
    let margin = cfg.margin.unwrap_or_default();
    let supcon = cfg.supcon.unwrap_or_default();
    let clf_slot = model.classifier_slot();

    let mut tpt = false;
    let mut tpt_epoch = None;
    let mut finals: Option<Finals> = None;

    for e in 0..epochs {
        let gamma = cfg.schedule.at(e);
        let mp = margin.at(e, epochs);
        let terms = LossTerms {
            gamma,
            supcon_tau: supcon.tau,
            supcon_weight: supcon.weight,
            margin_scale: mp.scale,
            arc_margin: mp.arc_margin,
            cos_margin: mp.cos_margin,
        };
        let factor = lr_halving_factor(e, cfg.train.lr_halving_start, cfg.train.lr_halving_every);
        let lrs = per_slot_learning_rates(model.params.len(), clf_slot, hp.lr, factor);
        debug_assert_eq!(lrs[clf_slot].to_bits(), hp.lr.to_bits());

        let mut ce_sum = 0.0;
        let mut l2_sum = 0.0;
        let mut aux_sum = 0.0;
        let mut aux_seen = false;
        let mut correct = 0usize;
        for idx in datasets::batches(n, batch_size, cfg.seed, e)? {
            let batch = train.subset(&idx);
            let (bl, grads) = model.loss_gradients(&batch.x, &batch.labels, &terms)?;
            adamw_step_grouped(&mut model.params, &grads, &mut state, &hp, &lrs)?;
            let w = idx.len() as f64;
            ce_sum += bl.ce * w;
            l2_sum += bl.l2 * w;
            if let Some(a) = bl.aux {
                aux_sum += a * w;
                aux_seen = true;
            }
            correct += bl.correct;
        }
        let train_accuracy = correct as f64 / n as f64;
        if !tpt && train_accuracy >= TPT_ACCURACY {
            tpt = true;
            tpt_epoch = Some(e);
        }

        let mut row = RunLogRow::new(e, Split::Train, train_accuracy, gamma, tpt);
        row.loss_ce = Some(ce_sum / n as f64);
        row.loss_l2 = Some(l2_sum / n as f64);
        row.loss_aux = aux_seen.then(|| aux_sum / n as f64);

        if !is_metrics_epoch(e, cfg.train.metric_cadence, epochs) {
            log.rows.push(row);
            continue;
        }

        let z = latents_of(model, &train.x)?;
        let mean_radius = mean_row_norm(&z);
        let batch = LatentBatch::new(z, train.labels.clone(), train.classes)?;
        let report = metrics::collapse_report(&batch, cfg.knn_k)?;
        let binarity = metrics::binarity_scores(&batch)?;
        row.sigma_w_trace = Some(report.sigma_w_trace);
        row.nc1 = Some(report.nc1);
        row.separation_ratio = Some(report.separation_ratio);
        row.mean_radius = Some(mean_radius);
        row.norm_cov = Some(report.norm_cov);
        row.entropy_per_dim = Some(report.entropy_per_dim);
        row.nc2_equinorm = Some(report.nc2.equinorm_cov);
        row.nc2_equiangularity_dev = Some(report.nc2.equiangularity_dev);
        row.nc2_cos_std = Some(report.nc2.cos_std);
        row.binarity_llh = Some(binarity.mean_loglik);
        row.binarity_sigma = Some(binarity.mean_sigma);
        row.binarity_peaks = Some(binarity.mean_peak_distance);
        log.rows.push(row);

        let test_accuracy = losses::accuracy(&model.forward(&test.x)?.logits, &test.labels)?;
        let mut test_row = RunLogRow::new(e, Split::Test, test_accuracy, gamma, tpt);
        if e + 1 == epochs {
            let params =
                DeepfoolParams { max_iter: cfg.attack.max_iter, overshoot: cfg.attack.overshoot };
            let robustness = robustness_sweep(model, &test.x, &params, cfg.attack.max_samples)?;
            test_row.robustness_mean = robustness.mean_rel_norm;
            test_row.robustness_median = robustness.median_rel_norm;
            test_row.robustness_converged_frac = Some(robustness.converged_frac);
            metrics::write_latents(&out_dir.join("latents.lpcz"), &batch)?;
            finals = Some(Finals {
                tpt_epoch,
                train_accuracy,
                test_accuracy,
                mean_radius,
                report,
                binarity,
                robustness,
            });
        }
        log.rows.push(test_row);
        save_checkpoint(model, ckpt_path)?;
    }

    let mut fin = finals.expect("the final epoch always runs the metric pass");
    fin.tpt_epoch = tpt_epoch;
    Ok(fin)
}
