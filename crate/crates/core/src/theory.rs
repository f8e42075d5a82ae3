//! Gradient flow of latents against a frozen linear classifier.
//!
//! This isolates what the penalty does to the latent geometry: with the
//! classifier fixed, each latent point follows the exact loss gradient, and
//! the per-class shells (radius, spread, diameter) can be watched directly
//! as the penalty weight varies.

use std::path::Path;

use crate::error::{Error, Result};
use crate::losses::log_sum_exp;
use crate::rng::Rng;
use crate::tensor::{dist, norm, Tensor2D};

/// A fixed linear classifier `z -> W z + b`.
#[derive(Debug, Clone)]
pub struct FrozenClassifier {
    /// K x P weight rows, one direction per class.
    pub w: Tensor2D,
    pub b: Vec<f64>,
}

impl FrozenClassifier {
    /// `bias` of `None` means zero biases. Duplicate weight rows are rejected:
    /// two identical class directions make the problem ill-posed.
    pub fn new(w: Tensor2D, bias: Option<Vec<f64>>) -> Result<Self> {
        let k = w.rows();
        if k < 2 {
            return Err(Error::InvalidInput("frozen classifier: need at least 2 classes".into()));
        }
        if !w.is_finite() {
            return Err(Error::InvalidInput("frozen classifier: non-finite weight".into()));
        }
        for a in 0..k {
            for bidx in (a + 1)..k {
                if w.row(a) == w.row(bidx) {
                    return Err(Error::InvalidInput(format!(
                        "frozen classifier: rows {a} and {bidx} are identical"
                    )));
                }
            }
        }
        let b = match bias {
            Some(b) => {
                if b.len() != k {
                    return Err(Error::shape(
                        "frozen_classifier",
                        format!("{} bias entries for {k} classes", b.len()),
                    ));
                }
                if b.iter().any(|v| !v.is_finite()) {
                    return Err(Error::InvalidInput("frozen classifier: non-finite bias".into()));
                }
                b
            }
            None => vec![0.0; k],
        };
        Ok(Self { w, b })
    }

    pub fn classes(&self) -> usize {
        self.w.rows()
    }

    pub fn dim(&self) -> usize {
        self.w.cols()
    }

    pub fn logits(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.dim() {
            return Err(Error::shape(
                "frozen_classifier",
                format!("point has {} coordinates, classifier expects {}", z.len(), self.dim()),
            ));
        }
        Ok((0..self.classes())
            .map(|k| {
                self.w.row(k).iter().zip(z).map(|(w, z)| w * z).sum::<f64>() + self.b[k]
            })
            .collect())
    }

    pub fn predict(&self, z: &[f64]) -> Result<usize> {
        let logits = self.logits(z)?;
        let mut best = 0;
        for (i, &v) in logits.iter().enumerate() {
            if v > logits[best] {
                best = i;
            }
        }
        Ok(best)
    }
}

/// Vertices of a centered regular simplex: K rows in P dimensions (P >= K-1)
/// with equal norms sqrt(1 - 1/K) and all pairwise cosines -1/(K-1).
///
/// Built by orthonormalising the centered one-hot directions e_p - (1/K)*1
/// and expressing each of them in that basis, then zero-padding to P.
pub fn simplex_vertices(classes: usize, dim: usize) -> Result<Tensor2D> {
    if classes < 2 {
        return Err(Error::InvalidInput("simplex: need at least 2 classes".into()));
    }
    if dim + 1 < classes {
        return Err(Error::InvalidInput(format!(
            "simplex: {classes} classes need at least {} dimensions, got {dim}",
            classes - 1
        )));
    }
    let k = classes;
    // Centered one-hots u_p = e_p - (1/K) 1, all lying in the hyperplane sum = 0.
    let mut u = Tensor2D::zeros(k, k);
    for p in 0..k {
        for c in 0..k {
            u.set(p, c, if p == c { 1.0 - 1.0 / k as f64 } else { -1.0 / k as f64 });
        }
    }
    // Gram-Schmidt on the first K-1 of them spans the hyperplane.
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(k - 1);
    for p in 0..k - 1 {
        let mut v = u.row(p).to_vec();
        for q in &basis {
            let proj: f64 = v.iter().zip(q).map(|(a, b)| a * b).sum();
            for (vi, qi) in v.iter_mut().zip(q) {
                *vi -= proj * qi;
            }
        }
        let n = norm(&v);
        debug_assert!(n > 1e-12, "centered one-hots cannot be dependent");
        for vi in &mut v {
            *vi /= n;
        }
        basis.push(v);
    }
    let mut out = Tensor2D::zeros(k, dim);
    for p in 0..k {
        for (j, q) in basis.iter().enumerate() {
            let coord: f64 = u.row(p).iter().zip(q).map(|(a, b)| a * b).sum();
            out.set(p, j, coord);
        }
    }
    Ok(out)
}

/// A set of latent points with labels, detached from any network.
#[derive(Debug, Clone)]
pub struct LatentCloud {
    /// N x P points.
    pub points: Tensor2D,
    pub labels: Vec<usize>,
}

impl LatentCloud {
    pub fn new(points: Tensor2D, labels: Vec<usize>) -> Result<Self> {
        if points.rows() == 0 {
            return Err(Error::InvalidInput("latent cloud: no points".into()));
        }
        if labels.len() != points.rows() {
            return Err(Error::shape(
                "latent_cloud",
                format!("{} points but {} labels", points.rows(), labels.len()),
            ));
        }
        if !points.is_finite() {
            return Err(Error::InvalidInput("latent cloud: non-finite point".into()));
        }
        Ok(Self { points, labels })
    }
}

/// Scatters `per_class` points around `radius` times each class's own
/// classifier direction, with isotropic noise of scale `sigma`.
///
/// Each point is redrawn until the classifier gets it right, so the result
/// always meets `simulate_collapse`'s correct-start requirement. A class
/// whose noise drowns the signal for 100 consecutive draws is an error.
pub fn vertex_cloud(
    clf: &FrozenClassifier,
    per_class: usize,
    radius: f64,
    sigma: f64,
    seed: u64,
) -> Result<LatentCloud> {
    if per_class == 0 {
        return Err(Error::InvalidInput("vertex_cloud: per_class must be positive".into()));
    }
    if !(radius.is_finite() && radius > 0.0) || !(sigma.is_finite() && sigma >= 0.0) {
        return Err(Error::InvalidInput(format!(
            "vertex_cloud: need radius > 0 and sigma >= 0, got {radius} and {sigma}"
        )));
    }
    let mut rng = Rng::seed(seed);
    let k = clf.classes();
    let dim = clf.dim();
    let mut points = Tensor2D::zeros(k * per_class, dim);
    let mut labels = Vec::with_capacity(k * per_class);
    for class in 0..k {
        let w = clf.w.row(class).to_vec();
        let wn = norm(&w);
        if wn == 0.0 {
            return Err(Error::InvalidInput(format!(
                "vertex_cloud: class {class} has a zero weight row, no direction to place on"
            )));
        }
        for j in 0..per_class {
            let mut placed = false;
            for _ in 0..100 {
                let candidate: Vec<f64> =
                    (0..dim).map(|c| radius * w[c] / wn + sigma * rng.normal()).collect();
                if clf.predict(&candidate)? == class {
                    points.row_mut(class * per_class + j).copy_from_slice(&candidate);
                    placed = true;
                    break;
                }
            }
            if !placed {
                return Err(Error::InvalidInput(format!(
                    "vertex_cloud: no correctly classified point for class {class} in 100 \
                     draws; sigma {sigma} overwhelms radius {radius}"
                )));
            }
            labels.push(class);
        }
    }
    LatentCloud::new(points, labels)
}

/// Scalar loss of a single point: cross-entropy at the frozen classifier
/// plus gamma times the squared norm.
pub fn point_loss(z: &[f64], label: usize, clf: &FrozenClassifier, gamma: f64) -> Result<f64> {
    if label >= clf.classes() {
        return Err(Error::InvalidInput(format!(
            "point_loss: label {label} out of range for {} classes",
            clf.classes()
        )));
    }
    let logits = clf.logits(z)?;
    let ce = log_sum_exp(&logits) - logits[label];
    let sq: f64 = z.iter().map(|v| v * v).sum();
    Ok(ce + gamma * sq)
}

/// Exact gradient of `point_loss` with respect to the point:
/// (-W_y + sum_i p_i W_i) + 2 gamma z, where p is the softmax of the logits.
pub fn latent_gradient(
    z: &[f64],
    label: usize,
    clf: &FrozenClassifier,
    gamma: f64,
) -> Result<Vec<f64>> {
    if gamma < 0.0 || !gamma.is_finite() {
        return Err(Error::InvalidInput(format!("latent_gradient: gamma {gamma} must be >= 0")));
    }
    if label >= clf.classes() {
        return Err(Error::InvalidInput(format!(
            "latent_gradient: label {label} out of range for {} classes",
            clf.classes()
        )));
    }
    let logits = clf.logits(z)?;
    let lse = log_sum_exp(&logits);
    let p: Vec<f64> = logits.iter().map(|l| (l - lse).exp()).collect();
    let mut g = vec![0.0_f64; z.len()];
    for k in 0..clf.classes() {
        let coef = p[k] - if k == label { 1.0 } else { 0.0 };
        for (gi, wi) in g.iter_mut().zip(clf.w.row(k)) {
            *gi += coef * wi;
        }
    }
    for (gi, zi) in g.iter_mut().zip(z) {
        *gi += 2.0 * gamma * zi;
    }
    Ok(g)
}

/// Shape of one class's latent shell.
#[derive(Debug, Clone, Copy)]
pub struct ShellStats {
    pub class: usize,
    pub count: usize,
    /// Mean norm of the class's points.
    pub mean_radius: f64,
    /// Population std of those norms.
    pub radial_spread: f64,
    /// Largest pairwise distance within the class.
    pub max_diameter: f64,
}

/// Per-class shell statistics; `classes` fixes how many classes must appear.
/// Errors if any class in 0..classes has no points.
pub fn shell_stats(cloud: &LatentCloud, classes: usize) -> Result<Vec<ShellStats>> {
    if classes < 1 {
        return Err(Error::InvalidInput("shell_stats: need at least one class".into()));
    }
    if let Some((i, &y)) = cloud.labels.iter().enumerate().find(|(_, &y)| y >= classes) {
        return Err(Error::InvalidInput(format!(
            "shell_stats: label {y} at point {i} out of range for {classes} classes"
        )));
    }
    let mut out = Vec::with_capacity(classes);
    for class in 0..classes {
        let members: Vec<usize> =
            (0..cloud.points.rows()).filter(|&i| cloud.labels[i] == class).collect();
        if members.is_empty() {
            return Err(Error::InvalidInput(format!("shell_stats: class {class} has no points")));
        }
        let norms: Vec<f64> = members.iter().map(|&i| norm(cloud.points.row(i))).collect();
        let mean = norms.iter().sum::<f64>() / norms.len() as f64;
        let var =
            norms.iter().map(|n| (n - mean) * (n - mean)).sum::<f64>() / norms.len() as f64;
        let mut diameter = 0.0_f64;
        for (ai, &a) in members.iter().enumerate() {
            for &b in &members[ai + 1..] {
                diameter = diameter.max(dist(cloud.points.row(a), cloud.points.row(b)));
            }
        }
        out.push(ShellStats {
            class,
            count: members.len(),
            mean_radius: mean,
            radial_spread: var.sqrt(),
            max_diameter: diameter,
        });
    }
    Ok(out)
}

/// One penalty weight's simulation output.
#[derive(Debug, Clone)]
pub struct GammaRun {
    pub gamma: f64,
    /// Snapshot per step: entry 0 is the initial cloud, entry `steps` the final one.
    pub trajectory: Vec<Tensor2D>,
    pub final_points: Tensor2D,
    pub shells: Vec<ShellStats>,
}

/// Descends every cloud point under `latent_gradient`, independently per
/// penalty weight, and reports final shell statistics plus full trajectories.
///
/// Descent is plain full-batch gradient descent with per-point backtracking:
/// a step that increases the point's loss is halved (up to 60 times) before
/// being taken. The cloud must start correctly classified.
pub fn simulate_collapse(
    clf: &FrozenClassifier,
    cloud: &LatentCloud,
    gamma_values: &[f64],
    steps: usize,
    step_size: f64,
) -> Result<Vec<GammaRun>> {
    if gamma_values.is_empty() {
        return Err(Error::InvalidInput("simulate_collapse: no gamma values".into()));
    }
    for &g in gamma_values {
        if g < 0.0 || !g.is_finite() {
            return Err(Error::InvalidInput(format!(
                "simulate_collapse: gamma {g} must be finite and >= 0"
            )));
        }
    }
    if steps == 0 {
        return Err(Error::InvalidInput("simulate_collapse: need at least one step".into()));
    }
    if !(step_size > 0.0 && step_size.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "simulate_collapse: step size {step_size} must be finite and > 0"
        )));
    }
    if cloud.points.cols() != clf.dim() {
        return Err(Error::shape(
            "simulate_collapse",
            format!("cloud dim {} vs classifier dim {}", cloud.points.cols(), clf.dim()),
        ));
    }
    if let Some(&y) = cloud.labels.iter().find(|&&y| y >= clf.classes()) {
        return Err(Error::InvalidInput(format!(
            "simulate_collapse: label {y} out of range for {} classes",
            clf.classes()
        )));
    }
    let misclassified: Vec<usize> = (0..cloud.points.rows())
        .filter(|&i| clf.predict(cloud.points.row(i)).unwrap() != cloud.labels[i])
        .collect();
    if !misclassified.is_empty() {
        return Err(Error::InvalidInput(format!(
            "simulate_collapse: points misclassified at init: {misclassified:?}"
        )));
    }

    // Per-gamma runs are fully independent; farm them out to scoped threads
    // and collect in gamma order so the output stays deterministic.
    let runs: Vec<Result<GammaRun>> = std::thread::scope(|scope| {
        let handles: Vec<_> = gamma_values
            .iter()
            .map(|&gamma| {
                scope.spawn(move || simulate_one_gamma(clf, cloud, gamma, steps, step_size))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("simulation thread panicked")).collect()
    });
    runs.into_iter().collect()
}

fn simulate_one_gamma(
    clf: &FrozenClassifier,
    cloud: &LatentCloud,
    gamma: f64,
    steps: usize,
    step_size: f64,
) -> Result<GammaRun> {
    let n = cloud.points.rows();
    let dim = cloud.points.cols();
    let mut points = cloud.points.clone();
    let mut trajectory = Vec::with_capacity(steps + 1);
    trajectory.push(points.clone());

    let mut proposal = vec![0.0_f64; dim];
    for _ in 0..steps {
        for i in 0..n {
            let label = cloud.labels[i];
            let z = points.row(i).to_vec();
            let g = latent_gradient(&z, label, clf, gamma)?;
            let before = point_loss(&z, label, clf, gamma)?;
            let mut eta = step_size;
            let mut accepted = false;
            for _ in 0..60 {
                for c in 0..dim {
                    proposal[c] = z[c] - eta * g[c];
                }
                if point_loss(&proposal, label, clf, gamma)? <= before {
                    accepted = true;
                    break;
                }
                eta *= 0.5;
            }
            if accepted {
                points.row_mut(i).copy_from_slice(&proposal);
            } // else: the point is at numerical stationarity; leave it
        }
        trajectory.push(points.clone());
    }

    let final_cloud = LatentCloud::new(points.clone(), cloud.labels.clone())?;
    let shells = shell_stats(&final_cloud, clf.classes())?;
    Ok(GammaRun { gamma, trajectory, final_points: points, shells })
}

/// Writes every run's trajectory as one flat CSV:
/// gamma, step, point_id, label, x0..x{P-1}, norm.
pub fn write_trajectory_csv(path: &Path, runs: &[GammaRun], labels: &[usize]) -> Result<()> {
    let dim = runs.first().map_or(0, |r| r.final_points.cols());
    let mut out = String::new();
    out.push_str("gamma,step,point_id,label");
    for c in 0..dim {
        out.push_str(&format!(",x{c}"));
    }
    out.push_str(",norm\n");
    for run in runs {
        for (step, snapshot) in run.trajectory.iter().enumerate() {
            for i in 0..snapshot.rows() {
                let row = snapshot.row(i);
                out.push_str(&format!("{},{step},{i},{}", run.gamma, labels[i]));
                for v in row {
                    out.push_str(&format!(",{v}"));
                }
                out.push_str(&format!(",{}\n", norm(row)));
            }
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}
