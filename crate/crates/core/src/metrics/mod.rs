//! Measurement battery for latent geometry: within/between-class covariance
//! statistics, collapse scores, nearest-neighbour entropy, per-coordinate
//! bimodality, and the LPCZ latent-dump format the trainer emits.

pub mod entropy;
pub mod gmm;
pub mod linalg;

pub use entropy::kl_entropy_per_dim;
pub use gmm::{fit_bimodal_gmm, GmmFit};
pub use linalg::{pinv_psd, symmetric_eigen, trace};

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{dist, norm, Tensor2D};

/// Relative eigenvalue cutoff for pseudo-inverting between-class covariance.
pub const PINV_REL_CUTOFF: f64 = 1e-10;

/// Floor on a sample's distance to its own class mean in separation ratios.
pub const SEPARATION_EPS: f64 = 1e-12;

/// A set of latent vectors with their class labels.
#[derive(Debug, Clone)]
pub struct LatentBatch {
    /// N x P latent matrix, one sample per row.
    pub z: Tensor2D,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl LatentBatch {
    pub fn new(z: Tensor2D, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if z.rows() == 0 || z.cols() == 0 {
            return Err(Error::InvalidInput("latent batch: empty matrix".into()));
        }
        if labels.len() != z.rows() {
            return Err(Error::shape(
                "latent_batch",
                format!("{} rows but {} labels", z.rows(), labels.len()),
            ));
        }
        if classes == 0 {
            return Err(Error::InvalidInput("latent batch: zero classes".into()));
        }
        if let Some((i, &y)) = labels.iter().enumerate().find(|(_, &y)| y >= classes) {
            return Err(Error::InvalidInput(format!(
                "latent batch: label {y} at row {i} out of range for {classes} classes"
            )));
        }
        if !z.is_finite() {
            return Err(Error::InvalidInput("latent batch: non-finite value".into()));
        }
        Ok(Self { z, labels, classes })
    }

    pub fn len(&self) -> usize {
        self.z.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.z.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.z.cols()
    }
}

/// Per-class means plus the global mean.
///
/// `global_mean` is computed as the count-weighted average of the class
/// means, so the identity between the two holds exactly, not merely up to
/// summation order.
#[derive(Debug, Clone)]
pub struct ClassStats {
    /// K x P matrix of class means.
    pub means: Tensor2D,
    pub counts: Vec<usize>,
    pub global_mean: Vec<f64>,
}

pub fn class_stats(batch: &LatentBatch) -> Result<ClassStats> {
    let k = batch.classes;
    let p = batch.dim();
    let mut counts = vec![0usize; k];
    let mut means = Tensor2D::zeros(k, p);
    for (i, &y) in batch.labels.iter().enumerate() {
        counts[y] += 1;
        let row = batch.z.row(i);
        let m = means.row_mut(y);
        for c in 0..p {
            m[c] += row[c];
        }
    }
    for (y, &count) in counts.iter().enumerate() {
        if count == 0 {
            return Err(Error::InvalidInput(format!("class_stats: class {y} has no samples")));
        }
        let inv = 1.0 / count as f64;
        for v in means.row_mut(y) {
            *v *= inv;
        }
    }
    let n_total: usize = counts.iter().sum();
    let mut global_mean = vec![0.0; p];
    for (y, &count) in counts.iter().enumerate() {
        let w = count as f64 / n_total as f64;
        for (c, v) in means.row(y).iter().enumerate() {
            global_mean[c] += w * v;
        }
    }
    Ok(ClassStats { means, counts, global_mean })
}

fn check_stats_match(batch: &LatentBatch, stats: &ClassStats) -> Result<()> {
    if stats.means.rows() != batch.classes
        || stats.means.cols() != batch.dim()
        || stats.counts.len() != batch.classes
    {
        return Err(Error::shape(
            "class_stats",
            format!(
                "stats for {}x{} / {} classes used with batch {}x{} / {} classes",
                stats.means.rows(),
                stats.means.cols(),
                stats.counts.len(),
                batch.len(),
                batch.dim(),
                batch.classes
            ),
        ));
    }
    Ok(())
}

/// Within-class covariance, normalised by the total sample count:
/// Sigma_W = (1/N) sum_i (z_i - mu_{y_i})(z_i - mu_{y_i})^T.
pub fn within_class_cov(batch: &LatentBatch, stats: &ClassStats) -> Result<Tensor2D> {
    check_stats_match(batch, stats)?;
    let p = batch.dim();
    let n = batch.len();
    let mut cov = Tensor2D::zeros(p, p);
    let mut d = vec![0.0_f64; p];
    for i in 0..n {
        let zi = batch.z.row(i);
        let mu = stats.means.row(batch.labels[i]);
        for c in 0..p {
            d[c] = zi[c] - mu[c];
        }
        for a in 0..p {
            let da = d[a];
            for (b, &db) in d.iter().enumerate() {
                cov.set(a, b, cov.get(a, b) + da * db);
            }
        }
    }
    Ok(cov.scale(1.0 / n as f64))
}

/// Between-class covariance, normalised by the class count:
/// Sigma_B = (1/K) sum_p (mu_p - mu_G)(mu_p - mu_G)^T.
pub fn between_class_cov(stats: &ClassStats) -> Tensor2D {
    let k = stats.means.rows();
    let p = stats.means.cols();
    let mut cov = Tensor2D::zeros(p, p);
    let mut d = vec![0.0_f64; p];
    for y in 0..k {
        let mu = stats.means.row(y);
        for c in 0..p {
            d[c] = mu[c] - stats.global_mean[c];
        }
        for a in 0..p {
            let da = d[a];
            for (b, &db) in d.iter().enumerate() {
                cov.set(a, b, cov.get(a, b) + da * db);
            }
        }
    }
    cov.scale(1.0 / k as f64)
}

/// Within-to-between variability ratio Tr(Sigma_W Sigma_B^+) / (K * P).
/// Zero iff every sample sits exactly on its class mean.
pub fn nc1_metric(sigma_w: &Tensor2D, sigma_b: &Tensor2D, classes: usize, dim: usize) -> Result<f64> {
    if sigma_w.shape() != (dim, dim) || sigma_b.shape() != (dim, dim) {
        return Err(Error::shape(
            "nc1",
            format!("covariances {:?} / {:?} for dim {dim}", sigma_w.shape(), sigma_b.shape()),
        ));
    }
    if classes == 0 || dim == 0 {
        return Err(Error::InvalidInput("nc1: classes and dim must be positive".into()));
    }
    let pinv = pinv_psd(sigma_b, PINV_REL_CUTOFF)?;
    // Tr(A B) = sum_ij A_ij B_ji, no need to materialise the product.
    let mut tr = 0.0;
    for i in 0..dim {
        for j in 0..dim {
            tr += sigma_w.get(i, j) * pinv.get(j, i);
        }
    }
    Ok(tr / (classes as f64 * dim as f64))
}

/// Per-sample ratio of the distance to the nearest *other* class mean over
/// the distance to the own class mean (floored at `SEPARATION_EPS`). Large
/// values mean the sample sits much closer to its own centroid than to any
/// competing one.
pub fn separation_ratios(batch: &LatentBatch, stats: &ClassStats) -> Result<Vec<f64>> {
    check_stats_match(batch, stats)?;
    if batch.classes < 2 {
        return Err(Error::InvalidInput("separation_ratios: need at least 2 classes".into()));
    }
    let n = batch.len();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let zi = batch.z.row(i);
        let y = batch.labels[i];
        let own = dist(zi, stats.means.row(y));
        let mut other = f64::INFINITY;
        for q in 0..batch.classes {
            if q == y {
                continue;
            }
            let d = dist(zi, stats.means.row(q));
            if d < other {
                other = d;
            }
        }
        out.push(other / own.max(SEPARATION_EPS));
    }
    Ok(out)
}

fn mean_and_pop_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Coefficient of variation of the row norms: population std over mean.
/// Zero iff all rows share one norm; errors if every row is exactly zero.
pub fn norm_cov(rows: &Tensor2D) -> Result<f64> {
    if rows.rows() == 0 {
        return Err(Error::InvalidInput("norm_cov: no rows".into()));
    }
    let norms: Vec<f64> = (0..rows.rows()).map(|i| norm(rows.row(i))).collect();
    let (mean, std) = mean_and_pop_std(&norms);
    if mean == 0.0 {
        return Err(Error::InvalidInput("norm_cov: all rows have zero norm".into()));
    }
    Ok(std / mean)
}

/// Geometry of the centered class means: how equal their norms are, how close
/// their pairwise cosines sit to the simplex value -1/(K-1), and how spread
/// those cosines are.
#[derive(Debug, Clone, Copy)]
pub struct Nc2Stats {
    pub equinorm_cov: f64,
    pub equiangularity_dev: f64,
    pub cos_std: f64,
}

pub fn nc2_metrics(stats: &ClassStats) -> Result<Nc2Stats> {
    let k = stats.means.rows();
    let p = stats.means.cols();
    if k < 2 {
        return Err(Error::InvalidInput("nc2: need at least 2 classes".into()));
    }
    let mut centered = Tensor2D::zeros(k, p);
    for y in 0..k {
        let mu = stats.means.row(y);
        let row = centered.row_mut(y);
        for c in 0..p {
            row[c] = mu[c] - stats.global_mean[c];
        }
    }
    let norms: Vec<f64> = (0..k).map(|y| norm(centered.row(y))).collect();
    for (y, &n) in norms.iter().enumerate() {
        if n == 0.0 {
            return Err(Error::InvalidInput(format!(
                "nc2: centered mean of class {y} has zero norm"
            )));
        }
    }
    let (norm_mean, norm_std) = mean_and_pop_std(&norms);

    let mut cosines = Vec::with_capacity(k * (k - 1) / 2);
    for a in 0..k {
        for b in (a + 1)..k {
            let mut dot = 0.0;
            for c in 0..p {
                dot += centered.get(a, c) * centered.get(b, c);
            }
            cosines.push(dot / (norms[a] * norms[b]));
        }
    }
    let target = -1.0 / (k as f64 - 1.0);
    let dev =
        cosines.iter().map(|c| (c - target).abs()).sum::<f64>() / cosines.len() as f64;
    let (_, cos_std) = mean_and_pop_std(&cosines);

    Ok(Nc2Stats { equinorm_cov: norm_std / norm_mean, equiangularity_dev: dev, cos_std })
}

/// Upper bound on the entropy of any K-valued discrete code: ln K.
pub fn discrete_entropy_bound(classes: usize) -> f64 {
    (classes as f64).ln()
}

/// Per-coordinate bimodality, from a two-component GMM fit to every latent
/// dimension. Means are taken across dimensions; the minima flag the least
/// bimodal coordinate.
#[derive(Debug, Clone)]
pub struct BinarityReport {
    pub mean_loglik: f64,
    pub mean_sigma: f64,
    pub mean_peak_distance: f64,
    pub min_loglik: f64,
    pub min_peak_distance: f64,
    pub fits: Vec<GmmFit>,
}

pub fn binarity_scores(batch: &LatentBatch) -> Result<BinarityReport> {
    let n = batch.len();
    let p = batch.dim();
    let mut fits = Vec::with_capacity(p);
    let mut column = vec![0.0_f64; n];
    for j in 0..p {
        for (i, slot) in column.iter_mut().enumerate() {
            *slot = batch.z.get(i, j);
        }
        fits.push(fit_bimodal_gmm(&column)?);
    }
    let pf = p as f64;
    let mean_loglik = fits.iter().map(|f| f.mean_loglik).sum::<f64>() / pf;
    let mean_sigma = fits.iter().map(|f| f.mean_sigma()).sum::<f64>() / pf;
    let mean_peak_distance = fits.iter().map(|f| f.peak_distance()).sum::<f64>() / pf;
    let min_loglik = fits.iter().map(|f| f.mean_loglik).fold(f64::INFINITY, f64::min);
    let min_peak_distance =
        fits.iter().map(|f| f.peak_distance()).fold(f64::INFINITY, f64::min);
    Ok(BinarityReport {
        mean_loglik,
        mean_sigma,
        mean_peak_distance,
        min_loglik,
        min_peak_distance,
        fits,
    })
}

/// Everything the epoch-cadence measurement pass reports about one latent batch.
#[derive(Debug, Clone)]
pub struct CollapseReport {
    pub samples: usize,
    pub dim: usize,
    pub classes: usize,
    pub sigma_w_trace: f64,
    pub nc1: f64,
    /// Mean separation ratio over samples.
    pub separation_ratio: f64,
    /// Coefficient of variation of all sample norms.
    pub norm_cov: f64,
    /// Same statistic over the class means only; None when all class means
    /// are exactly zero (possible for symmetric clouds even when samples are not).
    pub norm_cov_class_means: Option<f64>,
    pub entropy_per_dim: f64,
    /// Neighbour count actually used (requested k, clamped to N-1).
    pub entropy_k: usize,
    pub nc2: Nc2Stats,
    pub discrete_entropy_bound: f64,
}

pub fn collapse_report(batch: &LatentBatch, knn_k: usize) -> Result<CollapseReport> {
    if batch.classes < 2 {
        return Err(Error::InvalidInput("collapse_report: need at least 2 classes".into()));
    }
    if knn_k == 0 {
        return Err(Error::InvalidInput("collapse_report: knn k must be >= 1".into()));
    }
    let stats = class_stats(batch)?;
    let sigma_w = within_class_cov(batch, &stats)?;
    let sigma_b = between_class_cov(&stats);
    let nc1 = nc1_metric(&sigma_w, &sigma_b, batch.classes, batch.dim())?;
    let ratios = separation_ratios(batch, &stats)?;
    let separation_ratio = ratios.iter().sum::<f64>() / ratios.len() as f64;
    let norm_cov_all = norm_cov(&batch.z)?;
    let norm_cov_class_means = norm_cov(&stats.means).ok();
    // Two classes, both non-empty, so N >= 2 and the clamp keeps k valid.
    let entropy_k = knn_k.min(batch.len() - 1);
    let entropy_per_dim = kl_entropy_per_dim(&batch.z, entropy_k)?;
    let nc2 = nc2_metrics(&stats)?;
    Ok(CollapseReport {
        samples: batch.len(),
        dim: batch.dim(),
        classes: batch.classes,
        sigma_w_trace: trace(&sigma_w),
        nc1,
        separation_ratio,
        norm_cov: norm_cov_all,
        norm_cov_class_means,
        entropy_per_dim,
        entropy_k,
        nc2,
        discrete_entropy_bound: discrete_entropy_bound(batch.classes),
    })
}

// ---------------------------------------------------------------------------
// LPCZ: the latent-dump file format.
// Layout: b"LPCZ", then u32 LE version (=1), N, P, K; then N*P f64 LE latents
// row-major; then N u32 LE labels. No padding, no trailing bytes.

const LPCZ_MAGIC: [u8; 4] = *b"LPCZ";
pub const LPCZ_VERSION: u32 = 1;

pub fn write_latents(path: &Path, batch: &LatentBatch) -> Result<()> {
    for (what, v) in [("rows", batch.len()), ("cols", batch.dim()), ("classes", batch.classes)] {
        if v > u32::MAX as usize {
            return Err(Error::InvalidInput(format!("lpcz: {what} {v} exceeds u32 range")));
        }
    }
    let mut buf =
        Vec::with_capacity(20 + batch.z.as_slice().len() * 8 + batch.labels.len() * 4);
    buf.extend_from_slice(&LPCZ_MAGIC);
    for v in [LPCZ_VERSION, batch.len() as u32, batch.dim() as u32, batch.classes as u32] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for v in batch.z.as_slice() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for &y in &batch.labels {
        buf.extend_from_slice(&(y as u32).to_le_bytes());
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path.display().to_string(), e))
}

fn lpcz_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    let end = offset + 4;
    if bytes.len() < end {
        return Err(Error::Format {
            offset: offset as u64,
            message: format!("{what}: file ends at byte {}, needed 4 more", bytes.len()),
        });
    }
    Ok(u32::from_le_bytes(bytes[offset..end].try_into().unwrap()))
}

pub fn read_latents(path: &Path) -> Result<LatentBatch> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    if bytes.len() < 4 || bytes[0..4] != LPCZ_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: "bad magic: expected \"LPCZ\"".into(),
        });
    }
    let version = lpcz_u32(&bytes, 4, "version")?;
    if version != LPCZ_VERSION {
        return Err(Error::Format {
            offset: 4,
            message: format!("unsupported version {version}, expected {LPCZ_VERSION}"),
        });
    }
    let n = lpcz_u32(&bytes, 8, "row count")? as usize;
    let p = lpcz_u32(&bytes, 12, "column count")? as usize;
    let k = lpcz_u32(&bytes, 16, "class count")? as usize;
    if n == 0 {
        return Err(Error::Format { offset: 8, message: "zero rows".into() });
    }
    if p == 0 {
        return Err(Error::Format { offset: 12, message: "zero columns".into() });
    }
    if k == 0 {
        return Err(Error::Format { offset: 16, message: "zero classes".into() });
    }

    let data_start = 20usize;
    let labels_start = data_start + n * p * 8;
    let end = labels_start + n * 4;
    if bytes.len() < end {
        return Err(Error::Format {
            offset: bytes.len() as u64,
            message: format!(
                "file truncated: {} rows x {} cols needs {} bytes total, got {}",
                n,
                p,
                end,
                bytes.len()
            ),
        });
    }
    if bytes.len() > end {
        return Err(Error::Format {
            offset: end as u64,
            message: format!("{} trailing bytes after payload", bytes.len() - end),
        });
    }

    let mut data = Vec::with_capacity(n * p);
    for i in 0..n * p {
        let off = data_start + i * 8;
        data.push(f64::from_le_bytes(bytes[off..off + 8].try_into().unwrap()));
    }
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let off = labels_start + i * 4;
        let y = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
        if y >= k {
            return Err(Error::Format {
                offset: off as u64,
                message: format!("label {y} out of range for {k} classes"),
            });
        }
        labels.push(y);
    }
    let z = Tensor2D::from_vec(n, p, data)?;
    LatentBatch::new(z, labels, k)
}
