//! Dense classifier families for the collapse experiments.
//!
//! Every model is backbone -> optional penultimate layer -> zero-bias linear
//! classifier. The backbone is a stack of linear+swish layers; the
//! penultimate layer, when present, is linear (one variant adds swish); the
//! classifier has no bias parameter at all, so it cannot drift from zero.
//!
//! Weights are stored [out x in] and applied as x * W^T, matching the
//! checkpoint layout. Initialization is uniform(-a, a) with
//! a = sqrt(6 / (fan_in + fan_out)); biases start at zero.

use std::fmt;
use std::fs;
use std::io::Read;
use std::path::Path;

use crate::autodiff::{Gradients, NodeId, ParameterSet, Tape};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor2D;

/// The eleven trainable configurations of the ablation grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    Lpc,
    LpcWide,
    LpcNarrow,
    LpcScl,
    LpcNoPen,
    LinPen,
    NonlinPen,
    Scl,
    ArcFace,
    CosFace,
    NoPen,
}

pub const ALL_VARIANTS: [Variant; 11] = [
    Variant::Lpc,
    Variant::LpcWide,
    Variant::LpcNarrow,
    Variant::LpcScl,
    Variant::LpcNoPen,
    Variant::LinPen,
    Variant::NonlinPen,
    Variant::Scl,
    Variant::ArcFace,
    Variant::CosFace,
    Variant::NoPen,
];

/// Kind of penultimate layer a variant carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PenKind {
    Linear,
    /// Linear followed by swish (the nonlinear-penalty control).
    Swish,
}

impl Variant {
    pub fn name(&self) -> &'static str {
        match self {
            Variant::Lpc => "LPC",
            Variant::LpcWide => "LPC-Wide",
            Variant::LpcNarrow => "LPC-Narrow",
            Variant::LpcScl => "LPC-SCL",
            Variant::LpcNoPen => "LPC-NoPen",
            Variant::LinPen => "LinPen",
            Variant::NonlinPen => "NonlinPen",
            Variant::Scl => "SCL",
            Variant::ArcFace => "ArcFace",
            Variant::CosFace => "CosFace",
            Variant::NoPen => "NoPen",
        }
    }

    pub fn parse(s: &str) -> Result<Variant> {
        ALL_VARIANTS
            .iter()
            .copied()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                let names: Vec<&str> = ALL_VARIANTS.iter().map(|v| v.name()).collect();
                Error::Config(format!("unknown variant {s:?}; expected one of {}", names.join(", ")))
            })
    }

    /// Penultimate layer kind, or None when the latent is the backbone output.
    pub fn pen_kind(&self) -> Option<PenKind> {
        match self {
            Variant::Lpc
            | Variant::LpcWide
            | Variant::LpcNarrow
            | Variant::LpcScl
            | Variant::LinPen => Some(PenKind::Linear),
            Variant::NonlinPen => Some(PenKind::Swish),
            Variant::LpcNoPen | Variant::Scl | Variant::ArcFace | Variant::CosFace | Variant::NoPen => None,
        }
    }

    /// Whether training applies the latent L2 penalty.
    pub fn uses_l2(&self) -> bool {
        matches!(
            self,
            Variant::Lpc | Variant::LpcWide | Variant::LpcNarrow | Variant::LpcScl | Variant::LpcNoPen
        )
    }

    /// Whether training adds the supervised contrastive term on the backbone output.
    pub fn uses_supcon(&self) -> bool {
        matches!(self, Variant::LpcScl | Variant::Scl)
    }

    /// Margin loss replacing plain cross-entropy, if any.
    pub fn margin_kind(&self) -> Option<MarginKind> {
        match self {
            Variant::ArcFace => Some(MarginKind::Arc),
            Variant::CosFace => Some(MarginKind::Cos),
            _ => None,
        }
    }

    /// Default width of the penultimate layer for variants that have one.
    pub fn default_pen_dim(&self) -> Option<usize> {
        self.pen_kind()?;
        Some(match self {
            Variant::LpcNarrow => 2,
            Variant::LpcWide => 32,
            _ => 8,
        })
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MarginKind {
    Arc,
    Cos,
}

/// Validated architecture description.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArchitectureSpec {
    pub variant: Variant,
    pub input_dim: usize,
    pub backbone_widths: Vec<usize>,
    /// Present exactly for variants with a penultimate layer.
    pub penultimate_dim: Option<usize>,
    pub classes: usize,
}

impl ArchitectureSpec {
    /// Builds and validates a spec. For variants with a penultimate layer a
    /// missing dim falls back to the variant default (Narrow 2, Wide 32,
    /// otherwise 8); for variants without one a given dim is a config error.
    pub fn new(
        variant: Variant,
        input_dim: usize,
        backbone_widths: Vec<usize>,
        penultimate_dim: Option<usize>,
        classes: usize,
    ) -> Result<Self> {
        if input_dim == 0 {
            return Err(Error::Config("input_dim must be positive".into()));
        }
        if classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {classes}")));
        }
        if let Some(w) = backbone_widths.iter().find(|&&w| w == 0) {
            return Err(Error::Config(format!("backbone width must be positive, got {w}")));
        }
        let penultimate_dim = match variant.pen_kind() {
            Some(_) => {
                let dim = penultimate_dim.or_else(|| variant.default_pen_dim()).unwrap();
                if dim == 0 {
                    return Err(Error::Config("penultimate_dim must be positive".into()));
                }
                Some(dim)
            }
            None => {
                if penultimate_dim.is_some() {
                    return Err(Error::Config(format!(
                        "variant {} has no penultimate layer; remove penultimate_dim",
                        variant.name()
                    )));
                }
                None
            }
        };
        Ok(ArchitectureSpec { variant, input_dim, backbone_widths, penultimate_dim, classes })
    }

    /// Width of the latent the classifier sees.
    pub fn latent_dim(&self) -> usize {
        self.penultimate_dim
            .unwrap_or_else(|| self.backbone_widths.last().copied().unwrap_or(self.input_dim))
    }

    /// Backbone output width.
    pub fn backbone_dim(&self) -> usize {
        self.backbone_widths.last().copied().unwrap_or(self.input_dim)
    }
}

/// Penultimate-layer slots plus whether swish follows.
#[derive(Debug, Clone, Copy)]
struct PenLayer {
    w: usize,
    b: usize,
    swish: bool,
}

/// A built model: spec, parameters, and the slot plan for forward passes.
#[derive(Debug, Clone)]
pub struct ModelInstance {
    pub spec: ArchitectureSpec,
    pub params: ParameterSet,
    /// (weight slot, bias slot) per backbone layer.
    backbone: Vec<(usize, usize)>,
    pen: Option<PenLayer>,
    classifier: usize,
}

/// Values of one forward pass: backbone output, latent, logits.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub h: Tensor2D,
    pub z: Tensor2D,
    pub logits: Tensor2D,
}

/// Tape node ids for the same three stages, for building losses on top.
#[derive(Debug, Clone, Copy)]
pub struct TraceNodes {
    pub h: NodeId,
    pub z: NodeId,
    pub logits: NodeId,
}

fn xavier_uniform(rng: &mut Rng, out_dim: usize, in_dim: usize) -> Tensor2D {
    let a = (6.0 / (in_dim + out_dim) as f64).sqrt();
    let mut t = Tensor2D::zeros(out_dim, in_dim);
    for v in t.as_mut_slice() {
        *v = rng.uniform(-a, a);
    }
    t
}

/// Builds a model with freshly initialized parameters. Same spec and seed
/// give bitwise-identical parameters.
pub fn build_model(spec: &ArchitectureSpec, seed: u64) -> Result<ModelInstance> {
    // Revalidate: specs constructed literally can carry inconsistencies.
    let spec = ArchitectureSpec::new(
        spec.variant,
        spec.input_dim,
        spec.backbone_widths.clone(),
        spec.penultimate_dim,
        spec.classes,
    )?;
    let mut rng = Rng::derive(seed, 0x0d01);
    let mut params = ParameterSet::new();
    let mut backbone = Vec::new();
    let mut in_dim = spec.input_dim;
    for (i, &w) in spec.backbone_widths.iter().enumerate() {
        let ws = params.push(format!("backbone.{i}.weight"), xavier_uniform(&mut rng, w, in_dim))?;
        let bs = params.push(format!("backbone.{i}.bias"), Tensor2D::zeros(1, w))?;
        backbone.push((ws, bs));
        in_dim = w;
    }
    let pen = match spec.variant.pen_kind() {
        Some(kind) => {
            let dim = spec.penultimate_dim.unwrap();
            let stem = match kind {
                PenKind::Linear => "penultimate_linear",
                PenKind::Swish => "penultimate_swish",
            };
            let w = params.push(format!("{stem}.weight"), xavier_uniform(&mut rng, dim, in_dim))?;
            let b = params.push(format!("{stem}.bias"), Tensor2D::zeros(1, dim))?;
            in_dim = dim;
            Some(PenLayer { w, b, swish: kind == PenKind::Swish })
        }
        None => None,
    };
    // No bias slot exists for the classifier: the zero bias is structural.
    let classifier =
        params.push("classifier.weight", xavier_uniform(&mut rng, spec.classes, in_dim))?;
    Ok(ModelInstance { spec, params, backbone, pen, classifier })
}

impl ModelInstance {
    /// Slot of the final classifier weight (exempted from lr halving).
    pub fn classifier_slot(&self) -> usize {
        self.classifier
    }

    /// Records the forward pass on a tape rooted at input node `x`.
    pub fn forward_tape(&self, tape: &mut Tape, x: NodeId) -> Result<TraceNodes> {
        let mut cur = x;
        for &(w, b) in &self.backbone {
            let wn = tape.param(w, self.params.value(w).clone());
            let bn = tape.param(b, self.params.value(b).clone());
            let lin = tape.matmul_nt(cur, wn)?;
            let lin = tape.add_bias(lin, bn)?;
            cur = tape.swish(lin);
        }
        let h = cur;
        let z = match self.pen {
            Some(PenLayer { w, b, swish }) => {
                let wn = tape.param(w, self.params.value(w).clone());
                let bn = tape.param(b, self.params.value(b).clone());
                let lin = tape.matmul_nt(h, wn)?;
                let lin = tape.add_bias(lin, bn)?;
                if swish {
                    tape.swish(lin)
                } else {
                    lin
                }
            }
            None => h,
        };
        let wc = tape.param(self.classifier, self.params.value(self.classifier).clone());
        let logits = tape.matmul_nt(z, wc)?;
        Ok(TraceNodes { h, z, logits })
    }

    /// Pure forward pass. Runs through the same tape ops as training, so the
    /// two paths agree bitwise; repeated calls are bitwise identical.
    pub fn forward(&self, x: &Tensor2D) -> Result<ForwardTrace> {
        if x.cols() != self.spec.input_dim {
            return Err(Error::shape(
                "forward",
                format!("input {:?}, model expects {} columns", x.shape(), self.spec.input_dim),
            ));
        }
        let mut tape = Tape::new();
        let xn = tape.constant(x.clone());
        let t = self.forward_tape(&mut tape, xn)?;
        Ok(ForwardTrace {
            h: tape.value(t.h).clone(),
            z: tape.value(t.z).clone(),
            logits: tape.value(t.logits).clone(),
        })
    }

    /// Forward for a single sample given as a flat slice.
    pub fn forward_one(&self, x: &[f64]) -> Result<ForwardTrace> {
        self.forward(&Tensor2D::from_vec(1, x.len(), x.to_vec())?)
    }

    /// Gradient of one logit with respect to the input, at a single sample.
    /// Used by the input-space attack; each call replays a fresh tape.
    pub fn input_gradient(&self, x: &[f64], class: usize) -> Result<Vec<f64>> {
        if class >= self.spec.classes {
            return Err(Error::InvalidInput(format!(
                "class {class} out of range for {} classes",
                self.spec.classes
            )));
        }
        let mut tape = Tape::new();
        let xn = tape.input(0, Tensor2D::from_vec(1, x.len(), x.to_vec())?);
        let t = self.forward_tape(&mut tape, xn)?;
        let root = tape.pick(t.logits, 0, class)?;
        let grads = tape.backward(root)?;
        Ok(grads
            .input(0)
            .map(|g| g.as_slice().to_vec())
            .unwrap_or_else(|| vec![0.0; x.len()]))
    }

    /// Loss gradients for a batch: returns the scalar loss parts and dense
    /// per-slot gradients. `gamma`/`margin`/`supcon` settings are the
    /// harness's per-epoch values; which terms apply follows the variant.
    pub fn loss_gradients(
        &self,
        x: &Tensor2D,
        labels: &[usize],
        terms: &LossTerms,
    ) -> Result<(BatchLoss, Vec<Tensor2D>)> {
        let mut tape = Tape::new();
        let xn = tape.constant(x.clone());
        let t = self.forward_tape(&mut tape, xn)?;
        let (loss, root) = self.loss_on_tape(&mut tape, &t, labels, terms)?;
        let grads: Gradients = tape.backward(root)?;
        Ok((loss, grads.to_dense(&self.params)))
    }

    /// Builds the variant's training loss on an existing tape over traced
    /// nodes. Returns the breakdown (values only) and the scalar root node.
    pub fn loss_on_tape(
        &self,
        tape: &mut Tape,
        t: &TraceNodes,
        labels: &[usize],
        terms: &LossTerms,
    ) -> Result<(BatchLoss, NodeId)> {
        let variant = self.spec.variant;
        let mut root;
        let ce;
        let mut aux = None;

        match variant.margin_kind() {
            Some(kind) => {
                let u = tape.row_normalize(t.z);
                let wc = tape.param(self.classifier, self.params.value(self.classifier).clone());
                let v = tape.row_normalize(wc);
                let cos = tape.matmul_nt(u, v)?;
                let logits = match kind {
                    MarginKind::Arc => {
                        tape.arcface_logits(cos, labels, terms.margin_scale, terms.arc_margin)?
                    }
                    MarginKind::Cos => {
                        tape.cosface_logits(cos, labels, terms.margin_scale, terms.cos_margin)?
                    }
                };
                root = tape.ce_mean(logits, labels)?;
                ce = tape.scalar(root);
            }
            None => {
                root = tape.ce_mean(t.logits, labels)?;
                ce = tape.scalar(root);
            }
        }

        let l2_node = tape.l2_mean(t.z)?;
        let l2 = tape.scalar(l2_node);
        let mut gamma_used = 0.0;
        if variant.uses_l2() {
            gamma_used = terms.gamma;
            let scaled = tape.scale(l2_node, terms.gamma);
            root = tape.add(root, scaled)?;
        }
        if variant.uses_supcon() {
            let u = tape.row_normalize(t.h);
            let sc = tape.supcon(u, labels, terms.supcon_tau)?;
            aux = Some(tape.scalar(sc));
            let scaled = tape.scale(sc, terms.supcon_weight);
            root = tape.add(root, scaled)?;
        }

        let total = tape.scalar(root);
        if !total.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite training loss ({total}) for variant {}",
                variant.name()
            )));
        }
        // Accuracy always reads the plain logits; margins only reshape the loss.
        let correct = crate::losses::correct_count(tape.value(t.logits), labels)?;
        Ok((BatchLoss { ce, l2, aux, gamma_used, total, correct }, root))
    }
}

/// Per-epoch knobs the harness feeds into the variant loss.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub gamma: f64,
    pub supcon_tau: f64,
    pub supcon_weight: f64,
    pub margin_scale: f64,
    pub arc_margin: f64,
    pub cos_margin: f64,
}

impl Default for LossTerms {
    fn default() -> Self {
        LossTerms {
            gamma: 0.0,
            supcon_tau: 0.05,
            supcon_weight: 1.0,
            margin_scale: 16.0,
            arc_margin: 0.1,
            cos_margin: 0.05,
        }
    }
}

/// Scalar loss parts observed on one batch. `ce` is the classifier term
/// (for margin variants, the margin cross-entropy); `l2` is the mean squared
/// latent norm whether or not it enters `total`.
#[derive(Debug, Clone, Copy)]
pub struct BatchLoss {
    pub ce: f64,
    pub l2: f64,
    pub aux: Option<f64>,
    pub gamma_used: f64,
    pub total: f64,
    /// Rows whose plain-logit argmax hits the label, counted before the step.
    pub correct: usize,
}

// ---------------------------------------------------------------------------
// Checkpoints: plain-text header (one "name rows cols" line per parameter,
// blank line), then the parameters' f64 data little-endian in header order.
// ---------------------------------------------------------------------------

/// Writes the model parameters to a checkpoint file.
pub fn save_checkpoint(model: &ModelInstance, path: &Path) -> Result<()> {
    let mut header = String::new();
    for (name, t) in model.params.iter() {
        header.push_str(&format!("{} {} {}\n", name, t.rows(), t.cols()));
    }
    header.push('\n');
    let mut bytes = header.into_bytes();
    for (_, t) in model.params.iter() {
        for v in t.as_slice() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Reads a checkpoint and reconstructs the network function. The layer stack
/// is rebuilt from parameter names and shapes; the training-loss variant is
/// not stored, so the returned model carries a structural stand-in variant
/// (LinPen / NonlinPen / NoPen) that forwards identically.
pub fn load_checkpoint(path: &Path) -> Result<ModelInstance> {
    let mut file = fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes).map_err(|e| Error::io(path.display().to_string(), e))?;

    // Header ends at the first blank line.
    let mut header_end = None;
    let mut at = 0;
    while at < bytes.len() {
        let line_end = bytes[at..].iter().position(|&b| b == b'\n').map(|p| at + p);
        match line_end {
            Some(e) if e == at => {
                header_end = Some(e + 1);
                break;
            }
            Some(e) => at = e + 1,
            None => break,
        }
    }
    let header_end = header_end.ok_or_else(|| Error::Format {
        offset: bytes.len() as u64,
        message: "checkpoint header has no terminating blank line".into(),
    })?;
    let header = std::str::from_utf8(&bytes[..header_end]).map_err(|e| Error::Format {
        offset: e.valid_up_to() as u64,
        message: "checkpoint header is not UTF-8".into(),
    })?;

    let mut entries: Vec<(String, usize, usize)> = Vec::new();
    for line in header.lines() {
        if line.is_empty() {
            break;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 3 {
            return Err(Error::Format {
                offset: 0,
                message: format!("bad checkpoint header line {line:?}; want 'name rows cols'"),
            });
        }
        let rows: usize = parts[1].parse().map_err(|_| Error::Format {
            offset: 0,
            message: format!("bad row count in {line:?}"),
        })?;
        let cols: usize = parts[2].parse().map_err(|_| Error::Format {
            offset: 0,
            message: format!("bad column count in {line:?}"),
        })?;
        entries.push((parts[0].to_string(), rows, cols));
    }

    let want: usize = entries.iter().map(|(_, r, c)| r * c * 8).sum();
    let payload = &bytes[header_end..];
    if payload.len() != want {
        return Err(Error::Format {
            offset: header_end as u64,
            message: format!("checkpoint payload is {} bytes, header implies {}", payload.len(), want),
        });
    }

    let mut params = ParameterSet::new();
    let mut off = 0;
    for (name, rows, cols) in &entries {
        let n = rows * cols;
        let mut data = Vec::with_capacity(n);
        for k in 0..n {
            let s = off + k * 8;
            data.push(f64::from_le_bytes(payload[s..s + 8].try_into().unwrap()));
        }
        off += n * 8;
        params.push(name.clone(), Tensor2D::from_vec(*rows, *cols, data)?)?;
    }

    rebuild_from_params(params, path)
}

/// Reassembles a ModelInstance from named parameters.
fn rebuild_from_params(params: ParameterSet, path: &Path) -> Result<ModelInstance> {
    let bad = |msg: String| Error::Format { offset: 0, message: format!("{}: {msg}", path.display()) };

    let mut backbone = Vec::new();
    let mut widths = Vec::new();
    for i in 0.. {
        match (params.slot_of(&format!("backbone.{i}.weight")), params.slot_of(&format!("backbone.{i}.bias"))) {
            (Some(w), Some(b)) => {
                widths.push(params.value(w).rows());
                backbone.push((w, b));
            }
            (None, None) => break,
            _ => return Err(bad(format!("backbone layer {i} is missing weight or bias"))),
        }
    }
    let pen = if let Some(w) = params.slot_of("penultimate_linear.weight") {
        let b = params
            .slot_of("penultimate_linear.bias")
            .ok_or_else(|| bad("penultimate_linear.bias missing".into()))?;
        Some(PenLayer { w, b, swish: false })
    } else if let Some(w) = params.slot_of("penultimate_swish.weight") {
        let b = params
            .slot_of("penultimate_swish.bias")
            .ok_or_else(|| bad("penultimate_swish.bias missing".into()))?;
        Some(PenLayer { w, b, swish: true })
    } else {
        None
    };
    let classifier =
        params.slot_of("classifier.weight").ok_or_else(|| bad("classifier.weight missing".into()))?;

    let input_dim = backbone
        .first()
        .map(|&(w, _)| params.value(w).cols())
        .or_else(|| pen.map(|p| params.value(p.w).cols()))
        .unwrap_or_else(|| params.value(classifier).cols());
    let classes = params.value(classifier).rows();
    let variant = match pen {
        Some(PenLayer { swish: false, .. }) => Variant::LinPen,
        Some(PenLayer { swish: true, .. }) => Variant::NonlinPen,
        None => Variant::NoPen,
    };
    let penultimate_dim = pen.map(|p| params.value(p.w).rows());
    let spec = ArchitectureSpec::new(variant, input_dim, widths, penultimate_dim, classes)?;
    Ok(ModelInstance { spec, params, backbone, pen, classifier })
}

/// Writes latent vectors and labels produced by a model over a dataset.
/// Convenience wrapper: forward, then take the z stage.
pub fn latents_of(model: &ModelInstance, x: &Tensor2D) -> Result<Tensor2D> {
    Ok(model.forward(x)?.z)
}
