//! Loss functions and training schedules.
//!
//! Everything here is a pure function of tensors; the gradient tape wraps
//! these same kernels, so the value a loss reports during training and the
//! value computed standalone agree bitwise.

use crate::error::{Error, Result};
use crate::models::ForwardTrace;
use crate::tensor::{norm, Tensor2D};

/// Norm guard used whenever a vector is normalized to unit length.
pub const NORM_EPS: f64 = 1e-12;

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// swish(x) = x * sigmoid(x). Saturates to x for large x, to 0 for small x.
pub fn swish(x: f64) -> f64 {
    x * sigmoid(x)
}

pub fn swish_deriv(x: f64) -> f64 {
    let s = sigmoid(x);
    s + x * s * (1.0 - s)
}

/// log(sum(exp(row))) with max subtraction; finite for any finite row.
pub fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln()
}

/// Softmax of one row, max-subtracted.
pub fn softmax_row(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|&v| (v - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

fn check_labels(n: usize, labels: &[usize], classes: usize, op: &str) -> Result<()> {
    if n == 0 {
        return Err(Error::InvalidInput(format!("{op}: empty batch")));
    }
    if labels.len() != n {
        return Err(Error::InvalidInput(format!(
            "{op}: {} labels for {} rows",
            labels.len(),
            n
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::InvalidInput(format!(
            "{op}: label {bad} out of range for {classes} classes"
        )));
    }
    Ok(())
}

/// Mean cross-entropy of softmax(logits) against integer labels,
/// computed through log-sum-exp so saturated logits stay finite.
pub fn cross_entropy(logits: &Tensor2D, labels: &[usize]) -> Result<f64> {
    check_labels(logits.rows(), labels, logits.cols(), "cross_entropy")?;
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i);
        total += log_sum_exp(row) - row[y];
    }
    Ok(total / logits.rows() as f64)
}

/// Mean squared latent norm: (1/N) * sum_i ||z_i||^2.
pub fn l2_penalty(z: &Tensor2D) -> Result<f64> {
    if z.rows() == 0 {
        return Err(Error::InvalidInput("l2_penalty: empty batch".into()));
    }
    let total: f64 = z.as_slice().iter().map(|v| v * v).sum();
    Ok(total / z.rows() as f64)
}

/// Fraction of rows whose argmax logit equals the label. Ties break to the
/// lowest index, so the value is deterministic.
/// Number of rows whose argmax (ties to the lowest index) equals the label.
pub fn correct_count(logits: &Tensor2D, labels: &[usize]) -> Result<usize> {
    check_labels(logits.rows(), labels, logits.cols(), "correct_count")?;
    let mut hits = 0usize;
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i);
        let mut best = 0usize;
        for j in 1..row.len() {
            if row[j] > row[best] {
                best = j;
            }
        }
        if best == y {
            hits += 1;
        }
    }
    Ok(hits)
}

pub fn accuracy(logits: &Tensor2D, labels: &[usize]) -> Result<f64> {
    let hits = correct_count(logits, labels)?;
    Ok(hits as f64 / logits.rows() as f64)
}

/// Components of one training loss evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub ce: f64,
    pub l2: f64,
    /// Auxiliary term (the supervised contrastive loss) when the variant has one.
    pub auxiliary: Option<f64>,
    /// Penalty strength actually applied in `total`.
    pub gamma_used: f64,
    pub total: f64,
}

/// Cross-entropy plus the latent L2 penalty: ce + gamma * mean ||z||^2.
pub fn combined_loss(trace: &ForwardTrace, labels: &[usize], gamma: f64) -> Result<LossBreakdown> {
    if gamma < 0.0 {
        return Err(Error::InvalidInput(format!("combined_loss: negative gamma {gamma}")));
    }
    let ce = cross_entropy(&trace.logits, labels)?;
    let l2 = l2_penalty(&trace.z)?;
    Ok(LossBreakdown { ce, l2, auxiliary: None, gamma_used: gamma, total: ce + gamma * l2 })
}

/// Rows rescaled to unit Euclidean norm, guarding norms below [`NORM_EPS`].
pub fn row_normalize(x: &Tensor2D) -> Tensor2D {
    let mut out = x.clone();
    for i in 0..out.rows() {
        let r = norm(x.row(i)).max(NORM_EPS);
        for v in out.row_mut(i) {
            *v /= r;
        }
    }
    out
}

/// Supervised contrastive loss value. `u` must already be row-normalized.
///
/// Anchors with no positive in the batch are skipped; when every anchor is
/// skipped the loss is 0 and the degenerate flag is set.
pub fn supcon_from_normalized(u: &Tensor2D, labels: &[usize], tau: f64) -> Result<(f64, bool)> {
    let n = u.rows();
    check_labels(n, labels, usize::MAX, "supcon")?;
    if tau <= 0.0 {
        return Err(Error::InvalidInput(format!("supcon: tau must be positive, got {tau}")));
    }
    if n < 2 {
        return Ok((0.0, true));
    }
    let sims = u.matmul_nt(u)?;
    let mut total = 0.0;
    let mut anchors = 0usize;
    for i in 0..n {
        let positives: Vec<usize> =
            (0..n).filter(|&j| j != i && labels[j] == labels[i]).collect();
        if positives.is_empty() {
            continue;
        }
        anchors += 1;
        // log-sum-exp over all j != i of s_ij / tau.
        let others: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| sims.get(i, j) / tau).collect();
        let lse = log_sum_exp(&others);
        let mut term = 0.0;
        for &p in &positives {
            term += sims.get(i, p) / tau - lse;
        }
        total += term / positives.len() as f64;
    }
    if anchors == 0 {
        return Ok((0.0, true));
    }
    Ok((-total / anchors as f64, false))
}

/// Supervised contrastive loss on raw features (normalized internally).
pub fn supcon_loss(features: &Tensor2D, labels: &[usize], tau: f64) -> Result<(f64, bool)> {
    supcon_from_normalized(&row_normalize(features), labels, tau)
}

/// Additive-angular-margin logits. `cosines` holds cos(theta_ik) between
/// feature i and class k; the true-class entry becomes s*cos(theta + m),
/// every other entry s*cos(theta).
pub fn arcface_logits(cosines: &Tensor2D, labels: &[usize], scale: f64, margin: f64) -> Result<Tensor2D> {
    check_labels(cosines.rows(), labels, cosines.cols(), "arcface_logits")?;
    let mut out = cosines.scale(scale);
    for (i, &y) in labels.iter().enumerate() {
        let c = cosines.get(i, y).clamp(-1.0, 1.0);
        let sin_theta = (1.0 - c * c).max(0.0).sqrt();
        out.set(i, y, scale * (c * margin.cos() - sin_theta * margin.sin()));
    }
    Ok(out)
}

/// d(cos(theta + m))/d(cos theta), with the sin(theta) denominator floored so
/// the derivative stays finite when a feature aligns exactly with its class.
pub(crate) fn arcface_target_deriv(c: f64, margin: f64) -> f64 {
    let c = c.clamp(-1.0, 1.0);
    let sin_theta = (1.0 - c * c).max(0.0).sqrt().max(1e-6);
    margin.cos() + margin.sin() * c / sin_theta
}

/// Large-margin-cosine logits: s*(cos theta - m) on the true class.
pub fn cosface_logits(cosines: &Tensor2D, labels: &[usize], scale: f64, margin: f64) -> Result<Tensor2D> {
    check_labels(cosines.rows(), labels, cosines.cols(), "cosface_logits")?;
    let mut out = cosines.scale(scale);
    for (i, &y) in labels.iter().enumerate() {
        out.set(i, y, scale * (cosines.get(i, y) - margin));
    }
    Ok(out)
}

fn cosine_table(features: &Tensor2D, class_weights: &Tensor2D) -> Result<Tensor2D> {
    if features.cols() != class_weights.cols() {
        return Err(Error::shape(
            "margin_loss",
            format!(
                "features {:?} vs class weights {:?}",
                features.shape(),
                class_weights.shape()
            ),
        ));
    }
    row_normalize(features).matmul_nt(&row_normalize(class_weights))
}

/// ArcFace loss: mean CE over margin-modified cosine logits. `class_weights`
/// has one row per class; both sides are normalized internally.
pub fn arcface_loss(
    features: &Tensor2D,
    labels: &[usize],
    class_weights: &Tensor2D,
    scale: f64,
    margin: f64,
) -> Result<f64> {
    let cos = cosine_table(features, class_weights)?;
    cross_entropy(&arcface_logits(&cos, labels, scale, margin)?, labels)
}

/// CosFace loss: mean CE over cosine logits with an additive margin.
pub fn cosface_loss(
    features: &Tensor2D,
    labels: &[usize],
    class_weights: &Tensor2D,
    scale: f64,
    margin: f64,
) -> Result<f64> {
    let cos = cosine_table(features, class_weights)?;
    cross_entropy(&cosface_logits(&cos, labels, scale, margin)?, labels)
}

/// Geometric ramp for the latent penalty: gamma0 * step^epoch, capped at max.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GammaSchedule {
    pub gamma0: f64,
    pub gamma_step: f64,
    pub gamma_max: f64,
}

impl Default for GammaSchedule {
    fn default() -> Self {
        // Desk-scale cap; the ramp shape matters, not the asymptote.
        GammaSchedule { gamma0: 1e-2, gamma_step: 1.05, gamma_max: 1e3 }
    }
}

impl GammaSchedule {
    // Negated comparisons so NaN fails validation along with out-of-range values.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma0 > 0.0) {
            return Err(Error::Config(format!("gamma0 must be positive, got {}", self.gamma0)));
        }
        if !(self.gamma_step >= 1.0) {
            return Err(Error::Config(format!(
                "gamma_step must be >= 1 for a nondecreasing ramp, got {}",
                self.gamma_step
            )));
        }
        if !(self.gamma_max >= self.gamma0) {
            return Err(Error::Config(format!(
                "gamma_max {} below gamma0 {}",
                self.gamma_max, self.gamma0
            )));
        }
        Ok(())
    }

    /// Penalty strength at a given epoch. Reaches gamma_max exactly after
    /// finitely many epochs and stays there.
    pub fn at(&self, epoch: usize) -> f64 {
        let g = self.gamma0 * self.gamma_step.powi(epoch.min(i32::MAX as usize) as i32);
        g.min(self.gamma_max)
    }
}

/// Margin-loss hyperparameters at one epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarginPoint {
    pub scale: f64,
    pub arc_margin: f64,
    pub cos_margin: f64,
}

/// Linear ramps for the margin losses: scale 16 -> 64, ArcFace margin
/// 0.1 -> 0.5, CosFace margin 0.05 -> 0.25 across the run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarginSchedule {
    pub scale_start: f64,
    pub scale_end: f64,
    pub arc_start: f64,
    pub arc_end: f64,
    pub cos_start: f64,
    pub cos_end: f64,
}

impl Default for MarginSchedule {
    fn default() -> Self {
        MarginSchedule {
            scale_start: 16.0,
            scale_end: 64.0,
            arc_start: 0.1,
            arc_end: 0.5,
            cos_start: 0.05,
            cos_end: 0.25,
        }
    }
}

impl MarginSchedule {
    /// Values at `epoch` of a `total_epochs`-long run; epoch 0 gives the
    /// start values, the final epoch the end values.
    pub fn at(&self, epoch: usize, total_epochs: usize) -> MarginPoint {
        let t = if total_epochs <= 1 {
            1.0
        } else {
            (epoch as f64 / (total_epochs - 1) as f64).clamp(0.0, 1.0)
        };
        MarginPoint {
            scale: self.scale_start + (self.scale_end - self.scale_start) * t,
            arc_margin: self.arc_start + (self.arc_end - self.arc_start) * t,
            cos_margin: self.cos_start + (self.cos_end - self.cos_start) * t,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::dot;

    #[test]
    fn swish_reference_points() {
        assert!((swish(0.0)).abs() < 1e-15);
        // sigmoid(1) = 0.7310585786300049
        assert!((swish(1.0) - 0.731_058_578_630_004_9).abs() < 1e-12);
        assert!((swish(20.0) - 20.0).abs() < 1e-6);
        assert!(swish(-40.0).abs() < 1e-12);
        assert!(swish(-800.0).is_finite());
        assert!(swish(800.0).is_finite());
    }

    #[test]
    fn swish_deriv_matches_fd() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (swish(x + h) - swish(x - h)) / (2.0 * h);
            assert!((swish_deriv(x) - fd).abs() < 1e-8, "x={x}");
        }
    }

    #[test]
    fn softmax_two_logits() {
        // (0, ln 3) -> (0.25, 0.75)
        let p = softmax_row(&[0.0, 3.0_f64.ln()]);
        assert!((p[0] - 0.25).abs() < 1e-12);
        assert!((p[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_saturated_is_finite() {
        let p = softmax_row(&[1e4, 0.0, -1e4]);
        assert!(p.iter().all(|v| v.is_finite()));
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_uniform_two_class() {
        let logits = Tensor2D::from_rows(&[&[0.3, 0.3]]).unwrap();
        let ce = cross_entropy(&logits, &[0]).unwrap();
        assert!((ce - 2.0_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_three_logit_example() {
        // logits (1,2,3), label 2 -> ln(e + e^2 + e^3) - 3
        let logits = Tensor2D::from_rows(&[&[1.0, 2.0, 3.0]]).unwrap();
        let ce = cross_entropy(&logits, &[2]).unwrap();
        let want = (1f64.exp() + 2f64.exp() + 3f64.exp()).ln() - 3.0;
        assert!((ce - want).abs() < 1e-12);
        assert!((want - 0.407_605_964_444_380_13).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_bad_labels() {
        let logits = Tensor2D::zeros(2, 3);
        assert!(cross_entropy(&logits, &[0, 3]).is_err());
        assert!(cross_entropy(&logits, &[0]).is_err());
        assert!(cross_entropy(&Tensor2D::zeros(0, 3), &[]).is_err());
    }

    #[test]
    fn cross_entropy_nonnegative_random() {
        let mut rng = crate::rng::Rng::seed(5);
        for _ in 0..50 {
            let logits = Tensor2D::from_vec(
                4,
                3,
                (0..12).map(|_| rng.uniform(-30.0, 30.0)).collect(),
            )
            .unwrap();
            let labels: Vec<usize> = (0..4).map(|_| rng.below(3)).collect();
            assert!(cross_entropy(&logits, &labels).unwrap() >= 0.0);
        }
    }

    #[test]
    fn l2_penalty_example() {
        // rows (1,0) and (0,2) -> (1 + 4)/2 = 2.5
        let z = Tensor2D::from_rows(&[&[1.0, 0.0], &[0.0, 2.0]]).unwrap();
        assert!((l2_penalty(&z).unwrap() - 2.5).abs() < 1e-15);
    }

    #[test]
    fn supcon_identical_pair_is_zero() {
        // Two identical same-class unit vectors, tau = 1: loss = -log(e/e) = 0.
        let u = Tensor2D::from_rows(&[&[1.0, 0.0], &[1.0, 0.0]]).unwrap();
        let (v, degenerate) = supcon_from_normalized(&u, &[0, 0], 1.0).unwrap();
        assert!(v.abs() < 1e-12);
        assert!(!degenerate);
    }

    #[test]
    fn supcon_all_singletons_degenerate() {
        let u = Tensor2D::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap();
        let (v, degenerate) = supcon_from_normalized(&u, &[0, 1], 0.05).unwrap();
        assert_eq!(v, 0.0);
        assert!(degenerate);
    }

    #[test]
    fn supcon_matches_direct_summation() {
        // Independent recomputation: straight double loop over the formula.
        let mut rng = crate::rng::Rng::seed(17);
        let feats = Tensor2D::from_vec(6, 3, (0..18).map(|_| rng.normal()).collect()).unwrap();
        let labels = [0, 0, 1, 1, 2, 0];
        let tau = 0.05;
        let (got, deg) = supcon_loss(&feats, &labels, tau).unwrap();
        assert!(!deg);

        let u = row_normalize(&feats);
        let mut total = 0.0;
        let mut anchors = 0;
        for i in 0..6 {
            let pos: Vec<usize> = (0..6).filter(|&j| j != i && labels[j] == labels[i]).collect();
            if pos.is_empty() {
                continue;
            }
            anchors += 1;
            let denom: f64 =
                (0..6).filter(|&j| j != i).map(|j| (dot(u.row(i), u.row(j)) / tau).exp()).sum();
            let mut t = 0.0;
            for &p in &pos {
                t += ((dot(u.row(i), u.row(p)) / tau).exp() / denom).ln();
            }
            total += t / pos.len() as f64;
        }
        let want = -total / anchors as f64;
        assert!((got - want).abs() < 1e-9, "got {got} want {want}");
    }

    #[test]
    fn arcface_aligned_feature() {
        // Feature exactly on its class weight: cos(0 + m) = cos(m).
        let cos = Tensor2D::from_rows(&[&[1.0, 0.2]]).unwrap();
        let m = 0.5;
        let out = arcface_logits(&cos, &[0], 16.0, m).unwrap();
        assert!((out.get(0, 0) - 16.0 * m.cos()).abs() < 1e-12);
        assert!((out.get(0, 1) - 16.0 * 0.2).abs() < 1e-12);
    }

    #[test]
    fn arcface_two_class_reference() {
        // theta_y = 0.3, theta_other = 1.2, s = 16, m = 0.2.
        let (s, m) = (16.0, 0.2);
        let feats = Tensor2D::from_rows(&[&[1.0, 0.0]]).unwrap();
        let w = Tensor2D::from_rows(&[
            &[0.3_f64.cos(), 0.3_f64.sin()],
            &[1.2_f64.cos(), 1.2_f64.sin()],
        ])
        .unwrap();
        let got = arcface_loss(&feats, &[0], &w, s, m).unwrap();
        let l0 = s * (0.3_f64 + m).cos();
        let l1 = s * 1.2_f64.cos();
        let want = log_sum_exp(&[l0, l1]) - l0;
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn cosface_margin_only_on_target() {
        let (s, m) = (30.0, 0.25);
        let feats = Tensor2D::from_rows(&[&[0.0, 2.0]]).unwrap();
        let w = Tensor2D::from_rows(&[&[5.0, 0.0], &[0.0, 1.0]]).unwrap();
        let got = cosface_loss(&feats, &[1], &w, s, m).unwrap();
        // cos(feature, w0) = 0, cos(feature, w1) = 1.
        let want = log_sum_exp(&[0.0, s * (1.0 - m)]) - s * (1.0 - m);
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn margin_loss_scale_invariance() {
        // Normalization inside the loss makes feature and weight scale irrelevant.
        let mut rng = crate::rng::Rng::seed(23);
        let feats = Tensor2D::from_vec(4, 3, (0..12).map(|_| rng.normal()).collect()).unwrap();
        let w = Tensor2D::from_vec(3, 3, (0..9).map(|_| rng.normal()).collect()).unwrap();
        let labels = [0, 1, 2, 1];
        let a = arcface_loss(&feats, &labels, &w, 40.0, 0.3).unwrap();
        let b = arcface_loss(&feats.scale(7.5), &labels, &w.scale(0.01), 40.0, 0.3).unwrap();
        assert!((a - b).abs() < 1e-9);
        let c = cosface_loss(&feats, &labels, &w, 40.0, 0.15).unwrap();
        let d = cosface_loss(&feats.scale(3.0), &labels, &w.scale(100.0), 40.0, 0.15).unwrap();
        assert!((c - d).abs() < 1e-9);
    }

    #[test]
    fn gamma_schedule_ramp_and_cap() {
        let s = GammaSchedule::default();
        assert!((s.at(0) - 1e-2).abs() < 1e-18);
        assert!((s.at(1) - 1e-2 * 1.05).abs() < 1e-12);
        // Monotone nondecreasing, exactly capped.
        let mut prev = 0.0;
        for e in 0..600 {
            let g = s.at(e);
            assert!(g >= prev);
            prev = g;
        }
        assert_eq!(s.at(10_000), s.gamma_max);
    }

    #[test]
    fn margin_schedule_endpoints_and_midpoint() {
        let s = MarginSchedule::default();
        let start = s.at(0, 501);
        assert_eq!((start.scale, start.arc_margin, start.cos_margin), (16.0, 0.1, 0.05));
        let end = s.at(500, 501);
        assert_eq!((end.scale, end.arc_margin, end.cos_margin), (64.0, 0.5, 0.25));
        let mid = s.at(250, 501);
        assert!((mid.scale - 40.0).abs() < 1e-12);
        assert!((mid.arc_margin - 0.3).abs() < 1e-12);
        assert!((mid.cos_margin - 0.15).abs() < 1e-12);
    }

    #[test]
    fn gamma_schedule_validation() {
        assert!(GammaSchedule { gamma0: 0.0, ..Default::default() }.validate().is_err());
        assert!(GammaSchedule { gamma_step: 0.9, ..Default::default() }.validate().is_err());
        assert!(GammaSchedule { gamma_max: 1e-3, ..Default::default() }.validate().is_err());
        assert!(GammaSchedule::default().validate().is_ok());
    }
}
