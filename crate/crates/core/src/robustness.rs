//! Input-space robustness probe: the iterative minimal-perturbation attack
//! and its aggregation over a dataset.

use crate::error::{Error, Result};
use crate::models::ModelInstance;
use crate::tensor::{norm, Tensor2D};

/// Gradient directions with norm below this are useless as attack directions.
const DEGENERATE_W: f64 = 1e-20;

#[derive(Debug, Clone, Copy)]
pub struct DeepfoolParams {
    pub max_iter: usize,
    /// Overshoot past the linearised boundary, applied to the accumulated step.
    pub overshoot: f64,
}

impl Default for DeepfoolParams {
    fn default() -> Self {
        Self { max_iter: 50, overshoot: 0.02 }
    }
}

impl DeepfoolParams {
    pub fn validate(&self) -> Result<()> {
        if self.max_iter == 0 {
            return Err(Error::InvalidInput("deepfool: max_iter must be >= 1".into()));
        }
        if !self.overshoot.is_finite() || self.overshoot < 0.0 {
            return Err(Error::InvalidInput(format!(
                "deepfool: overshoot {} must be finite and >= 0",
                self.overshoot
            )));
        }
        Ok(())
    }
}

/// Result of attacking one sample.
#[derive(Debug, Clone)]
pub struct AttackOutcome {
    /// Overshoot-scaled perturbation; adding it to the input realises `final_label`.
    pub perturbation: Vec<f64>,
    /// Perturbation norm over the input norm (floored at 1e-30).
    pub rel_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    /// The model's own prediction at the clean input; the attack flips this,
    /// whatever the ground-truth label says.
    pub source_label: usize,
    pub final_label: usize,
}

fn argmax_row(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Minimal-perturbation attack on one input. Each iteration linearises every
/// logit at the current point (one tape replay per class), steps to the
/// nearest decision boundary, and stops once the overshot point changes the
/// model's prediction.
pub fn deepfool(model: &ModelInstance, x: &[f64], params: &DeepfoolParams) -> Result<AttackOutcome> {
    params.validate()?;
    let classes = model.spec.classes;
    let dim = x.len();

    let source_label = argmax_row(model.forward_one(x)?.logits.row(0));
    let mut current = x.to_vec();
    let mut r_total = vec![0.0_f64; dim];
    let mut converged = false;
    let mut iterations = 0;
    let mut final_label = source_label;

    let mut candidate = vec![0.0_f64; dim];
    while iterations < params.max_iter {
        iterations += 1;
        let logits = model.forward_one(&current)?.logits;
        let g_source = model.input_gradient(&current, source_label)?;

        // Nearest linearised boundary: minimise |f_k - f_src| / ||w_k||.
        let mut best: Option<(f64, Vec<f64>, f64, f64)> = None; // (score, w, |f'|, ||w||)
        for k in 0..classes {
            if k == source_label {
                continue;
            }
            let g_k = model.input_gradient(&current, k)?;
            let w: Vec<f64> = g_k.iter().zip(&g_source).map(|(a, b)| a - b).collect();
            let w_norm = norm(&w);
            if w_norm < DEGENERATE_W {
                continue;
            }
            let f_prime = (logits.get(0, k) - logits.get(0, source_label)).abs();
            let score = f_prime / w_norm;
            if best.as_ref().is_none_or(|(s, _, _, _)| score < *s) {
                best = Some((score, w, f_prime, w_norm));
            }
        }
        let Some((_, w, f_prime, w_norm)) = best else {
            return Err(Error::Numeric(
                "deepfool: every candidate direction has zero gradient \
                 (constant classifier at this point)"
                    .into(),
            ));
        };

        let coef = f_prime / (w_norm * w_norm);
        for i in 0..dim {
            r_total[i] += coef * w[i];
            current[i] = x[i] + r_total[i];
            candidate[i] = x[i] + (1.0 + params.overshoot) * r_total[i];
        }
        let label_now = argmax_row(model.forward_one(&candidate)?.logits.row(0));
        if label_now != source_label {
            converged = true;
            final_label = label_now;
            break;
        }
    }

    let perturbation: Vec<f64> =
        r_total.iter().map(|r| (1.0 + params.overshoot) * r).collect();
    let rel_norm = norm(&perturbation) / norm(x).max(1e-30);
    Ok(AttackOutcome { perturbation, rel_norm, iterations, converged, source_label, final_label })
}

/// Aggregate attack statistics over a set of inputs. The headline mean and
/// median cover converged samples only and are absent when nothing converged;
/// `mean_rel_norm_all` counts every sample, with failures contributing the
/// (lower-bound) perturbation they reached.
#[derive(Debug, Clone)]
pub struct RobustnessStats {
    pub samples: usize,
    pub converged: usize,
    pub converged_frac: f64,
    pub mean_rel_norm: Option<f64>,
    pub median_rel_norm: Option<f64>,
    pub mean_rel_norm_all: f64,
}

/// Attacks the first `limit` rows of `x` (all rows when `None`). A sample
/// where no usable attack direction exists counts as non-converged with zero
/// perturbation; any other failure aborts the sweep.
pub fn robustness_sweep(
    model: &ModelInstance,
    x: &Tensor2D,
    params: &DeepfoolParams,
    limit: Option<usize>,
) -> Result<RobustnessStats> {
    params.validate()?;
    let n = limit.map_or(x.rows(), |l| l.min(x.rows()));
    if n == 0 {
        return Err(Error::InvalidInput("robustness_sweep: no samples".into()));
    }
    let mut converged_norms = Vec::with_capacity(n);
    let mut sum_all = 0.0;
    for i in 0..n {
        match deepfool(model, x.row(i), params) {
            Ok(outcome) => {
                sum_all += outcome.rel_norm;
                if outcome.converged {
                    converged_norms.push(outcome.rel_norm);
                }
            }
            Err(Error::Numeric(_)) => {} // unattackable here; contributes 0 to the mean
            Err(e) => return Err(e),
        }
    }
    let converged = converged_norms.len();
    let (mean, median) = if converged == 0 {
        (None, None)
    } else {
        let mean = converged_norms.iter().sum::<f64>() / converged as f64;
        converged_norms.sort_by(|a, b| a.total_cmp(b));
        let median = if converged % 2 == 1 {
            converged_norms[converged / 2]
        } else {
            0.5 * (converged_norms[converged / 2 - 1] + converged_norms[converged / 2])
        };
        (Some(mean), Some(median))
    };
    Ok(RobustnessStats {
        samples: n,
        converged,
        converged_frac: converged as f64 / n as f64,
        mean_rel_norm: mean,
        median_rel_norm: median,
        mean_rel_norm_all: sum_all / n as f64,
    })
}
