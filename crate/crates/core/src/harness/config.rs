//! Line-oriented experiment configuration.
//!
//! The file format is `key = value`, one pair per line, `#` starting a
//! comment, section prefixes dotted (`schedule.gamma_step`). Parsing is
//! strict: unknown keys, keys that do not apply to the chosen variant or
//! dataset kind, duplicates, and constraint violations are all errors that
//! name the key and line. `effective_text` renders the resolved config back
//! into the same format; parsing that text reproduces the config exactly,
//! and re-rendering reproduces the text byte for byte.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::losses::{GammaSchedule, MarginSchedule};
use crate::models::Variant;

/// Everything `run_experiment` needs, fully resolved except for the dataset
/// seed (kept optional so the echo only pins it when the file did).
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub variant: Variant,
    pub seed: u64,
    pub output_dir: String,
    pub dataset: DatasetConfig,
    pub backbone: Vec<usize>,
    /// Resolved width for variants with a penultimate layer, `None` otherwise.
    pub pen_dim: Option<usize>,
    pub schedule: GammaSchedule,
    /// Present exactly for the margin variants.
    pub margin: Option<MarginSchedule>,
    /// Present exactly for the supervised-contrastive variants.
    pub supcon: Option<SupconConfig>,
    pub train: TrainConfig,
    pub knn_k: usize,
    pub attack: AttackConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetConfig {
    Blobs {
        classes: usize,
        per_class: usize,
        test_per_class: usize,
        dim: usize,
        sigma: f64,
        center_radius: f64,
        /// Explicit sampling seed; falls back to the run seed.
        seed: Option<u64>,
        standardize: bool,
    },
    Rings {
        classes: usize,
        per_class: usize,
        test_per_class: usize,
        sigma: f64,
        seed: Option<u64>,
        standardize: bool,
    },
    Idx {
        images: String,
        labels: String,
        /// Held-out files; reusing the training files when absent is
        /// deliberate (toy runs that only care about train-split collapse).
        test_images: Option<String>,
        test_labels: Option<String>,
        standardize: bool,
    },
}

impl DatasetConfig {
    pub fn kind_name(&self) -> &'static str {
        match self {
            DatasetConfig::Blobs { .. } => "blobs",
            DatasetConfig::Rings { .. } => "rings",
            DatasetConfig::Idx { .. } => "idx",
        }
    }

    pub fn standardize(&self) -> bool {
        match self {
            DatasetConfig::Blobs { standardize, .. }
            | DatasetConfig::Rings { standardize, .. }
            | DatasetConfig::Idx { standardize, .. } => *standardize,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SupconConfig {
    pub tau: f64,
    pub weight: f64,
}

impl Default for SupconConfig {
    fn default() -> Self {
        SupconConfig { tau: 0.05, weight: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub lr_halving_start: usize,
    pub lr_halving_every: usize,
    pub metric_cadence: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 500,
            batch_size: 64,
            learning_rate: 1e-3,
            weight_decay: 0.5e-4,
            lr_halving_start: 250,
            lr_halving_every: 50,
            metric_cadence: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttackConfig {
    pub max_iter: usize,
    pub overshoot: f64,
    /// Cap on attacked test points; `None` attacks the whole split.
    pub max_samples: Option<usize>,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig { max_iter: 50, overshoot: 0.02, max_samples: None }
    }
}

impl ExperimentConfig {
    /// Sampling seed for synthetic datasets: explicit value or the run seed.
    pub fn dataset_seed(&self) -> u64 {
        match &self.dataset {
            DatasetConfig::Blobs { seed, .. } | DatasetConfig::Rings { seed, .. } => {
                seed.unwrap_or(self.seed)
            }
            DatasetConfig::Idx { .. } => self.seed,
        }
    }
}

/// Every key the schema knows, across all variants and dataset kinds. Used
/// to tell "does not apply here" from "no such key".
const KNOWN_KEYS: &[&str] = &[
    "variant",
    "seed",
    "output_dir",
    "dataset.kind",
    "dataset.classes",
    "dataset.per_class",
    "dataset.test_per_class",
    "dataset.dim",
    "dataset.sigma",
    "dataset.center_radius",
    "dataset.seed",
    "dataset.standardize",
    "dataset.images",
    "dataset.labels",
    "dataset.test_images",
    "dataset.test_labels",
    "arch.backbone",
    "arch.pen_dim",
    "schedule.gamma0",
    "schedule.gamma_step",
    "schedule.gamma_max",
    "margin.scale_start",
    "margin.scale_end",
    "margin.arc_start",
    "margin.arc_end",
    "margin.cos_start",
    "margin.cos_end",
    "supcon.tau",
    "supcon.weight",
    "train.epochs",
    "train.batch_size",
    "train.learning_rate",
    "train.weight_decay",
    "train.lr_halving_start",
    "train.lr_halving_every",
    "train.metric_cadence",
    "metrics.knn_k",
    "attack.max_iter",
    "attack.overshoot",
    "attack.max_samples",
];

struct Fields {
    map: BTreeMap<String, (String, usize)>,
}

impl Fields {
    fn new(text: &str) -> Result<Fields> {
        let mut map: BTreeMap<String, (String, usize)> = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = match raw.find('#') {
                Some(at) => &raw[..at],
                None => raw,
            };
            let body = body.trim();
            if body.is_empty() {
                continue;
            }
            let (key, value) = body.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {line}: expected 'key = value', got {body:?}"))
            })?;
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if key.is_empty() {
                return Err(Error::Config(format!("line {line}: empty key")));
            }
            if let Some((_, first)) = map.get(&key) {
                return Err(Error::Config(format!(
                    "line {line}: duplicate key '{key}' (first set at line {first})"
                )));
            }
            map.insert(key, (value, line));
        }
        Ok(Fields { map })
    }

    fn take(&mut self, key: &str) -> Option<(String, usize)> {
        self.map.remove(key)
    }

    fn take_string(&mut self, key: &str) -> Option<String> {
        self.take(key).map(|(v, _)| v)
    }

    fn take_parsed<T: std::str::FromStr>(&mut self, key: &str, ty: &str) -> Result<Option<(T, usize)>> {
        match self.take(key) {
            None => Ok(None),
            Some((v, line)) => {
                let parsed = v.parse::<T>().map_err(|_| {
                    Error::Config(format!("line {line}: {key} expects {ty}, got {v:?}"))
                })?;
                Ok(Some((parsed, line)))
            }
        }
    }

    fn take_usize(&mut self, key: &str) -> Result<Option<(usize, usize)>> {
        self.take_parsed(key, "a non-negative integer")
    }

    fn take_u64(&mut self, key: &str) -> Result<Option<(u64, usize)>> {
        self.take_parsed(key, "a non-negative integer")
    }

    fn take_f64(&mut self, key: &str) -> Result<Option<(f64, usize)>> {
        match self.take_parsed::<f64>(key, "a number")? {
            Some((v, line)) if !v.is_finite() => {
                Err(Error::Config(format!("line {line}: {key} must be finite, got {v}")))
            }
            other => Ok(other),
        }
    }

    fn take_bool(&mut self, key: &str) -> Result<Option<(bool, usize)>> {
        self.take_parsed(key, "true or false")
    }

    /// Errors on the first (lowest-line) leftover key.
    fn finish(self) -> Result<()> {
        let mut leftovers: Vec<(usize, String)> =
            self.map.into_iter().map(|(k, (_, line))| (line, k)).collect();
        leftovers.sort();
        match leftovers.into_iter().next() {
            None => Ok(()),
            Some((line, key)) => {
                if KNOWN_KEYS.contains(&key.as_str()) {
                    Err(Error::Config(format!(
                        "line {line}: key '{key}' does not apply to this configuration"
                    )))
                } else {
                    Err(Error::Config(format!("line {line}: unknown key '{key}'")))
                }
            }
        }
    }
}

fn require_min_usize(key: &str, got: Option<(usize, usize)>, default: usize, min: usize) -> Result<usize> {
    match got {
        None => Ok(default),
        Some((v, _)) if v >= min => Ok(v),
        Some((v, line)) => {
            Err(Error::Config(format!("line {line}: {key} must be >= {min}, got {v}")))
        }
    }
}

fn require_f64(
    key: &str,
    got: Option<(f64, usize)>,
    default: f64,
    check: impl Fn(f64) -> bool,
    constraint: &str,
) -> Result<f64> {
    match got {
        None => Ok(default),
        Some((v, _)) if check(v) => Ok(v),
        Some((v, line)) => {
            Err(Error::Config(format!("line {line}: {key} must be {constraint}, got {v}")))
        }
    }
}

fn parse_backbone(value: &str, line: usize) -> Result<Vec<usize>> {
    let value = value.trim();
    if value.is_empty() {
        return Ok(Vec::new());
    }
    let mut widths = Vec::new();
    for part in value.split(',') {
        let part = part.trim();
        let w: usize = part.parse().map_err(|_| {
            Error::Config(format!(
                "line {line}: arch.backbone expects comma-separated widths, got {part:?}"
            ))
        })?;
        if w == 0 {
            return Err(Error::Config(format!("line {line}: arch.backbone widths must be >= 1")));
        }
        widths.push(w);
    }
    Ok(widths)
}

pub fn parse_config_str(text: &str) -> Result<ExperimentConfig> {
    let mut f = Fields::new(text)?;

    let (vname, vline) = f
        .take("variant")
        .ok_or_else(|| Error::Config("missing required key 'variant'".into()))?;
    let variant = Variant::parse(&vname).map_err(|e| match e {
        Error::Config(msg) => Error::Config(format!("line {vline}: {msg}")),
        other => other,
    })?;

    let seed = f.take_u64("seed")?.map(|(v, _)| v).unwrap_or(0);
    let output_dir = f.take_string("output_dir").unwrap_or_else(|| "lpc-out".to_string());

    let dataset = parse_dataset(&mut f)?;

    let backbone = match f.take("arch.backbone") {
        None => vec![16, 8],
        Some((v, line)) => parse_backbone(&v, line)?,
    };
    let pen_dim = match (variant.pen_kind().is_some(), f.take_usize("arch.pen_dim")?) {
        (true, Some((v, line))) => {
            if v == 0 {
                return Err(Error::Config(format!("line {line}: arch.pen_dim must be >= 1")));
            }
            Some(v)
        }
        (true, None) => variant.default_pen_dim(),
        (false, Some((_, line))) => {
            return Err(Error::Config(format!(
                "line {line}: arch.pen_dim does not apply to variant {variant} (no penultimate layer)"
            )));
        }
        (false, None) => None,
    };

    let gamma0 = require_f64(
        "schedule.gamma0",
        f.take_f64("schedule.gamma0")?,
        GammaSchedule::default().gamma0,
        |v| v > 0.0,
        "positive",
    )?;
    let gamma_step = require_f64(
        "schedule.gamma_step",
        f.take_f64("schedule.gamma_step")?,
        GammaSchedule::default().gamma_step,
        |v| v >= 1.0,
        ">= 1 (the ramp never decreases)",
    )?;
    let max_got = f.take_f64("schedule.gamma_max")?;
    let max_line = max_got.map(|(_, l)| l);
    let gamma_max = require_f64(
        "schedule.gamma_max",
        max_got,
        GammaSchedule::default().gamma_max,
        |v| v > 0.0,
        "positive",
    )?;
    if gamma_max < gamma0 {
        let line = max_line.unwrap_or(0);
        return Err(Error::Config(format!(
            "line {line}: schedule.gamma_max ({gamma_max}) must be >= schedule.gamma0 ({gamma0})"
        )));
    }
    let schedule = GammaSchedule { gamma0, gamma_step, gamma_max };

    let margin = if variant.margin_kind().is_some() {
        let d = MarginSchedule::default();
        let positive = |v: f64| v > 0.0;
        let nonneg = |v: f64| v >= 0.0;
        Some(MarginSchedule {
            scale_start: require_f64(
                "margin.scale_start",
                f.take_f64("margin.scale_start")?,
                d.scale_start,
                positive,
                "positive",
            )?,
            scale_end: require_f64(
                "margin.scale_end",
                f.take_f64("margin.scale_end")?,
                d.scale_end,
                positive,
                "positive",
            )?,
            arc_start: require_f64(
                "margin.arc_start",
                f.take_f64("margin.arc_start")?,
                d.arc_start,
                nonneg,
                ">= 0",
            )?,
            arc_end: require_f64(
                "margin.arc_end",
                f.take_f64("margin.arc_end")?,
                d.arc_end,
                nonneg,
                ">= 0",
            )?,
            cos_start: require_f64(
                "margin.cos_start",
                f.take_f64("margin.cos_start")?,
                d.cos_start,
                nonneg,
                ">= 0",
            )?,
            cos_end: require_f64(
                "margin.cos_end",
                f.take_f64("margin.cos_end")?,
                d.cos_end,
                nonneg,
                ">= 0",
            )?,
        })
    } else {
        None
    };

    let supcon = if variant.uses_supcon() {
        let d = SupconConfig::default();
        Some(SupconConfig {
            tau: require_f64("supcon.tau", f.take_f64("supcon.tau")?, d.tau, |v| v > 0.0, "positive")?,
            weight: require_f64(
                "supcon.weight",
                f.take_f64("supcon.weight")?,
                d.weight,
                |v| v >= 0.0,
                ">= 0",
            )?,
        })
    } else {
        None
    };

    let td = TrainConfig::default();
    let train = TrainConfig {
        epochs: require_min_usize("train.epochs", f.take_usize("train.epochs")?, td.epochs, 1)?,
        batch_size: require_min_usize(
            "train.batch_size",
            f.take_usize("train.batch_size")?,
            td.batch_size,
            1,
        )?,
        learning_rate: require_f64(
            "train.learning_rate",
            f.take_f64("train.learning_rate")?,
            td.learning_rate,
            |v| v > 0.0,
            "positive",
        )?,
        weight_decay: require_f64(
            "train.weight_decay",
            f.take_f64("train.weight_decay")?,
            td.weight_decay,
            |v| v >= 0.0,
            ">= 0",
        )?,
        lr_halving_start: f.take_usize("train.lr_halving_start")?.map(|(v, _)| v).unwrap_or(td.lr_halving_start),
        lr_halving_every: require_min_usize(
            "train.lr_halving_every",
            f.take_usize("train.lr_halving_every")?,
            td.lr_halving_every,
            1,
        )?,
        metric_cadence: require_min_usize(
            "train.metric_cadence",
            f.take_usize("train.metric_cadence")?,
            td.metric_cadence,
            1,
        )?,
    };

    let knn_k = require_min_usize("metrics.knn_k", f.take_usize("metrics.knn_k")?, 20, 1)?;

    let ad = AttackConfig::default();
    let attack = AttackConfig {
        max_iter: require_min_usize("attack.max_iter", f.take_usize("attack.max_iter")?, ad.max_iter, 1)?,
        overshoot: require_f64(
            "attack.overshoot",
            f.take_f64("attack.overshoot")?,
            ad.overshoot,
            |v| v >= 0.0,
            ">= 0",
        )?,
        max_samples: match f.take_usize("attack.max_samples")? {
            None => None,
            Some((v, line)) => {
                if v == 0 {
                    return Err(Error::Config(format!(
                        "line {line}: attack.max_samples must be >= 1 (omit the key to attack all)"
                    )));
                }
                Some(v)
            }
        },
    };

    f.finish()?;

    Ok(ExperimentConfig {
        variant,
        seed,
        output_dir,
        dataset,
        backbone,
        pen_dim,
        schedule,
        margin,
        supcon,
        train,
        knn_k,
        attack,
    })
}

fn parse_dataset(f: &mut Fields) -> Result<DatasetConfig> {
    let kind = match f.take("dataset.kind") {
        None => "blobs".to_string(),
        Some((v, line)) => match v.as_str() {
            "blobs" | "rings" | "idx" => v,
            other => {
                return Err(Error::Config(format!(
                    "line {line}: dataset.kind must be one of blobs, rings, idx; got {other:?}"
                )));
            }
        },
    };

    let standardize = f.take_bool("dataset.standardize")?.map(|(v, _)| v).unwrap_or(false);

    match kind.as_str() {
        "blobs" => {
            let classes =
                require_min_usize("dataset.classes", f.take_usize("dataset.classes")?, 3, 2)?;
            let per_class =
                require_min_usize("dataset.per_class", f.take_usize("dataset.per_class")?, 300, 1)?;
            let test_per_class = require_min_usize(
                "dataset.test_per_class",
                f.take_usize("dataset.test_per_class")?,
                (per_class / 4).max(1),
                1,
            )?;
            let dim = require_min_usize("dataset.dim", f.take_usize("dataset.dim")?, 2, 2)?;
            let sigma = require_f64(
                "dataset.sigma",
                f.take_f64("dataset.sigma")?,
                0.1,
                |v| v >= 0.0,
                ">= 0",
            )?;
            let center_radius = require_f64(
                "dataset.center_radius",
                f.take_f64("dataset.center_radius")?,
                3.0,
                |v| v > 0.0,
                "positive",
            )?;
            let seed = f.take_u64("dataset.seed")?.map(|(v, _)| v);
            Ok(DatasetConfig::Blobs {
                classes,
                per_class,
                test_per_class,
                dim,
                sigma,
                center_radius,
                seed,
                standardize,
            })
        }
        "rings" => {
            let classes =
                require_min_usize("dataset.classes", f.take_usize("dataset.classes")?, 3, 2)?;
            let per_class =
                require_min_usize("dataset.per_class", f.take_usize("dataset.per_class")?, 300, 1)?;
            let test_per_class = require_min_usize(
                "dataset.test_per_class",
                f.take_usize("dataset.test_per_class")?,
                (per_class / 4).max(1),
                1,
            )?;
            let sigma = require_f64(
                "dataset.sigma",
                f.take_f64("dataset.sigma")?,
                0.1,
                |v| v >= 0.0,
                ">= 0",
            )?;
            let seed = f.take_u64("dataset.seed")?.map(|(v, _)| v);
            Ok(DatasetConfig::Rings { classes, per_class, test_per_class, sigma, seed, standardize })
        }
        "idx" => {
            let images = f.take_string("dataset.images").ok_or_else(|| {
                Error::Config("dataset.images is required when dataset.kind = idx".into())
            })?;
            let labels = f.take_string("dataset.labels").ok_or_else(|| {
                Error::Config("dataset.labels is required when dataset.kind = idx".into())
            })?;
            let test_images = f.take_string("dataset.test_images");
            let test_labels = f.take_string("dataset.test_labels");
            if test_images.is_some() != test_labels.is_some() {
                return Err(Error::Config(
                    "dataset.test_images and dataset.test_labels must be given together".into(),
                ));
            }
            Ok(DatasetConfig::Idx { images, labels, test_images, test_labels, standardize })
        }
        _ => unreachable!("kind validated above"),
    }
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text =
        fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_config_str(&text)
}

/// Renders the resolved config in canonical key order. Guarantees:
/// `parse_config_str(effective_text(c)) == c` and rendering the re-parsed
/// config reproduces the text byte for byte.
pub fn effective_text(cfg: &ExperimentConfig) -> String {
    let mut s = String::new();
    let mut kv = |k: &str, v: String| {
        s.push_str(k);
        s.push_str(" = ");
        s.push_str(&v);
        s.push('\n');
    };

    kv("variant", cfg.variant.name().to_string());
    kv("seed", cfg.seed.to_string());
    kv("output_dir", cfg.output_dir.clone());

    kv("dataset.kind", cfg.dataset.kind_name().to_string());
    match &cfg.dataset {
        DatasetConfig::Blobs {
            classes,
            per_class,
            test_per_class,
            dim,
            sigma,
            center_radius,
            seed,
            standardize,
        } => {
            kv("dataset.classes", classes.to_string());
            kv("dataset.per_class", per_class.to_string());
            kv("dataset.test_per_class", test_per_class.to_string());
            kv("dataset.dim", dim.to_string());
            kv("dataset.sigma", sigma.to_string());
            kv("dataset.center_radius", center_radius.to_string());
            if let Some(seed) = seed {
                kv("dataset.seed", seed.to_string());
            }
            kv("dataset.standardize", standardize.to_string());
        }
        DatasetConfig::Rings { classes, per_class, test_per_class, sigma, seed, standardize } => {
            kv("dataset.classes", classes.to_string());
            kv("dataset.per_class", per_class.to_string());
            kv("dataset.test_per_class", test_per_class.to_string());
            kv("dataset.sigma", sigma.to_string());
            if let Some(seed) = seed {
                kv("dataset.seed", seed.to_string());
            }
            kv("dataset.standardize", standardize.to_string());
        }
        DatasetConfig::Idx { images, labels, test_images, test_labels, standardize } => {
            kv("dataset.images", images.clone());
            kv("dataset.labels", labels.clone());
            if let Some(ti) = test_images {
                kv("dataset.test_images", ti.clone());
            }
            if let Some(tl) = test_labels {
                kv("dataset.test_labels", tl.clone());
            }
            kv("dataset.standardize", standardize.to_string());
        }
    }

    let widths: Vec<String> = cfg.backbone.iter().map(|w| w.to_string()).collect();
    kv("arch.backbone", widths.join(","));
    if let Some(p) = cfg.pen_dim {
        kv("arch.pen_dim", p.to_string());
    }

    kv("schedule.gamma0", cfg.schedule.gamma0.to_string());
    kv("schedule.gamma_step", cfg.schedule.gamma_step.to_string());
    kv("schedule.gamma_max", cfg.schedule.gamma_max.to_string());

    if let Some(m) = &cfg.margin {
        kv("margin.scale_start", m.scale_start.to_string());
        kv("margin.scale_end", m.scale_end.to_string());
        kv("margin.arc_start", m.arc_start.to_string());
        kv("margin.arc_end", m.arc_end.to_string());
        kv("margin.cos_start", m.cos_start.to_string());
        kv("margin.cos_end", m.cos_end.to_string());
    }
    if let Some(sc) = &cfg.supcon {
        kv("supcon.tau", sc.tau.to_string());
        kv("supcon.weight", sc.weight.to_string());
    }

    kv("train.epochs", cfg.train.epochs.to_string());
    kv("train.batch_size", cfg.train.batch_size.to_string());
    kv("train.learning_rate", cfg.train.learning_rate.to_string());
    kv("train.weight_decay", cfg.train.weight_decay.to_string());
    kv("train.lr_halving_start", cfg.train.lr_halving_start.to_string());
    kv("train.lr_halving_every", cfg.train.lr_halving_every.to_string());
    kv("train.metric_cadence", cfg.train.metric_cadence.to_string());

    kv("metrics.knn_k", cfg.knn_k.to_string());

    kv("attack.max_iter", cfg.attack.max_iter.to_string());
    kv("attack.overshoot", cfg.attack.overshoot.to_string());
    if let Some(ms) = cfg.attack.max_samples {
        kv("attack.max_samples", ms.to_string());
    }

    s
}

/// Writes the canonical echo next to the run outputs.
pub fn write_effective_config(cfg: &ExperimentConfig, dir: &Path) -> Result<std::path::PathBuf> {
    let path = dir.join("config_effective.cfg");
    fs::write(&path, effective_text(cfg)).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(path)
}
