//! Protocol-level guarantees of the experiment harness: determinism of the
//! on-disk artifacts, the vanishing-penalty equivalence between LPC and the
//! unpenalized control, abort behavior, and the config echo contract.

use std::fs;
use std::path::Path;

use lpc_core::error::Error;
use lpc_core::harness::config::parse_config_str;
use lpc_core::harness::experiment::run_experiment;
use lpc_core::harness::runlog::RunLog;
use lpc_core::metrics::read_latents;
use lpc_core::models::{latents_of, load_checkpoint};

fn tiny_config(out: &Path, extra: &str) -> lpc_core::harness::ExperimentConfig {
    let text = format!(
        "variant = LPC\n\
         seed = 11\n\
         output_dir = {}\n\
         dataset.per_class = 18\n\
         dataset.test_per_class = 6\n\
         arch.backbone = 8\n\
         arch.pen_dim = 2\n\
         train.epochs = 10\n\
         train.batch_size = 16\n\
         train.metric_cadence = 4\n\
         metrics.knn_k = 5\n\
         attack.max_samples = 5\n\
         {extra}",
        out.display()
    );
    parse_config_str(&text).unwrap()
}

#[test]
fn identical_config_and_seed_replays_bit_for_bit() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_a = tiny_config(&dir.path().join("a"), "");
    let cfg_b = tiny_config(&dir.path().join("b"), "");
    let out_a = run_experiment(&cfg_a).unwrap();
    let out_b = run_experiment(&cfg_b).unwrap();

    for name in ["runlog.csv", "latents.lpcz", "model.ckpt"] {
        let a = fs::read(out_a.out_dir.join(name)).unwrap();
        let b = fs::read(out_b.out_dir.join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between identical runs");
    }
}

#[test]
fn vanishing_gamma_lpc_reproduces_linpen_byte_for_byte() {
    // With γ pinned at 1e-300 the penalty's contribution to every loss and
    // gradient rounds away in 64-bit arithmetic, so the LPC run must walk
    // the exact trajectory of the penalty-free linear control under the
    // same seed — down to the serialized artifacts. The gamma column logs
    // the schedule for both, so even that matches.
    let dir = tempfile::tempdir().unwrap();
    let schedule = "schedule.gamma0 = 1e-300\nschedule.gamma_step = 1\n";
    let lpc = tiny_config(&dir.path().join("lpc"), schedule);
    let mut linpen_text = format!(
        "variant = LinPen\n\
         seed = 11\n\
         output_dir = {}\n\
         dataset.per_class = 18\n\
         dataset.test_per_class = 6\n\
         arch.backbone = 8\n\
         arch.pen_dim = 2\n\
         train.epochs = 10\n\
         train.batch_size = 16\n\
         train.metric_cadence = 4\n\
         metrics.knn_k = 5\n\
         attack.max_samples = 5\n",
        dir.path().join("linpen").display()
    );
    linpen_text.push_str(schedule);
    let linpen = parse_config_str(&linpen_text).unwrap();

    let out_lpc = run_experiment(&lpc).unwrap();
    let out_linpen = run_experiment(&linpen).unwrap();

    for name in ["runlog.csv", "latents.lpcz", "model.ckpt"] {
        let a = fs::read(out_lpc.out_dir.join(name)).unwrap();
        let b = fs::read(out_linpen.out_dir.join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between vanishing-γ LPC and LinPen");
    }
}

#[test]
fn effective_config_echo_reparses_to_itself() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(&dir.path().join("run"), "dataset.seed = 3\n");
    let out = run_experiment(&cfg).unwrap();

    let echo_path = out.out_dir.join("config_effective.cfg");
    let echo = fs::read_to_string(&echo_path).unwrap();
    let reparsed = parse_config_str(&echo).unwrap();
    assert_eq!(reparsed, cfg);
    assert_eq!(lpc_core::harness::effective_text(&reparsed), echo);
}

#[test]
fn checkpoint_and_latent_export_agree_bitwise() {
    // Two independent serializations of the final state: the checkpoint
    // (parameters) and the LPCZ export (latents). Replaying the checkpoint
    // over the training inputs must land on the exported latents exactly.
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(&dir.path().join("run"), "");
    let out = run_experiment(&cfg).unwrap();

    let model = load_checkpoint(&out.out_dir.join("model.ckpt")).unwrap();
    let (train, _) = lpc_core::harness::experiment::build_datasets(&cfg).unwrap();
    let replayed = latents_of(&model, &train.x).unwrap();
    let exported = read_latents(&out.out_dir.join("latents.lpcz")).unwrap();

    assert_eq!(exported.len(), replayed.rows());
    assert_eq!(exported.labels, train.labels);
    for i in 0..replayed.rows() {
        for (a, b) in replayed.row(i).iter().zip(exported.z.row(i)) {
            assert_eq!(a.to_bits(), b.to_bits(), "latent mismatch at row {i}");
        }
    }
}

#[test]
fn numeric_blowup_aborts_with_diagnostic_and_last_good_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(&dir.path().join("boom"), "train.learning_rate = 1e200\n");
    let err = run_experiment(&cfg).unwrap_err();
    assert!(matches!(err, Error::Numeric(_)), "expected numeric abort, got {err}");

    let out = dir.path().join("boom");
    let diagnostic = fs::read_to_string(out.join("abort.txt")).unwrap();
    assert!(!diagnostic.trim().is_empty());
    // Whatever rows were completed before the blowup still parse.
    RunLog::read_csv(&out.join("runlog.csv")).unwrap();
    // The checkpoint predates the blowup and must load cleanly.
    let model = load_checkpoint(&out.join("model.ckpt")).unwrap();
    for slot in 0..model.params.len() {
        assert!(model.params.value(slot).as_slice().iter().all(|v| v.is_finite()));
    }
}

#[test]
fn idx_dataset_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    // Persist a small blob dataset in IDX form, then train from the files.
    let ds = lpc_core::datasets::gaussian_blobs(&lpc_core::datasets::BlobSpec {
        classes: 3,
        per_class: 12,
        dim: 4,
        sigma: 0.2,
        center_radius: 3.0,
        seed: 7,
    })
    .unwrap();
    let images = dir.path().join("train-images.idx");
    let labels = dir.path().join("train-labels.idx");
    lpc_core::datasets::save_idx(&ds, 2, 2, &images, &labels).unwrap();

    let text = format!(
        "variant = LPC\n\
         output_dir = {}\n\
         dataset.kind = idx\n\
         dataset.images = {}\n\
         dataset.labels = {}\n\
         dataset.standardize = true\n\
         arch.backbone = 8\n\
         arch.pen_dim = 2\n\
         train.epochs = 6\n\
         train.batch_size = 12\n\
         train.metric_cadence = 3\n\
         metrics.knn_k = 4\n\
         attack.max_samples = 4\n",
        dir.path().join("idx-run").display(),
        images.display(),
        labels.display()
    );
    let cfg = parse_config_str(&text).unwrap();
    let out = run_experiment(&cfg).unwrap();
    out.runlog.validate().unwrap();
    // Without held-out files the test split reads the training files.
    assert_eq!(out.final_report.samples, 36);
}
