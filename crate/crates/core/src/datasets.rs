//! Synthetic datasets, IDX image files, normalization, and batching.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor2D;

/// Feature matrix plus integer labels. Rows of `x` are samples.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub x: Tensor2D,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    fn validate(self) -> Result<Self> {
        if self.labels.len() != self.x.rows() {
            return Err(Error::InvalidInput(format!(
                "dataset: {} rows but {} labels",
                self.x.rows(),
                self.labels.len()
            )));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= self.classes) {
            return Err(Error::InvalidInput(format!(
                "dataset: label {bad} out of range for {} classes",
                self.classes
            )));
        }
        Ok(self)
    }

    /// Row subset in the given index order.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let mut x = Tensor2D::zeros(idx.len(), self.dim());
        let mut labels = Vec::with_capacity(idx.len());
        for (to, &from) in idx.iter().enumerate() {
            x.row_mut(to).copy_from_slice(self.x.row(from));
            labels.push(self.labels[from]);
        }
        Dataset { x, labels, classes: self.classes }
    }
}

/// Parameters of the Gaussian-blob generator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlobSpec {
    pub classes: usize,
    pub per_class: usize,
    pub dim: usize,
    pub sigma: f64,
    /// Class centers sit on a circle of this radius in the first two coords.
    pub center_radius: f64,
    pub seed: u64,
}

/// Isotropic Gaussian blobs; class p is centered at angle 2*pi*p/K on a
/// circle in the first two coordinates, zero elsewhere.
pub fn gaussian_blobs(spec: &BlobSpec) -> Result<Dataset> {
    if spec.classes < 2 {
        return Err(Error::InvalidInput(format!("blobs: need >= 2 classes, got {}", spec.classes)));
    }
    if spec.per_class == 0 {
        return Err(Error::InvalidInput("blobs: per_class must be positive".into()));
    }
    if spec.dim < 2 {
        return Err(Error::InvalidInput(format!("blobs: dim must be >= 2, got {}", spec.dim)));
    }
    if spec.sigma < 0.0 {
        return Err(Error::InvalidInput(format!("blobs: sigma must be >= 0, got {}", spec.sigma)));
    }
    let mut rng = Rng::derive(spec.seed, 0xb10b);
    let n = spec.classes * spec.per_class;
    let mut x = Tensor2D::zeros(n, spec.dim);
    let mut labels = Vec::with_capacity(n);
    let mut row = 0;
    for p in 0..spec.classes {
        let angle = 2.0 * std::f64::consts::PI * p as f64 / spec.classes as f64;
        let (cx, cy) = (spec.center_radius * angle.cos(), spec.center_radius * angle.sin());
        for _ in 0..spec.per_class {
            let out = x.row_mut(row);
            out[0] = cx + spec.sigma * rng.normal();
            out[1] = cy + spec.sigma * rng.normal();
            for v in out.iter_mut().skip(2) {
                *v = spec.sigma * rng.normal();
            }
            labels.push(p);
            row += 1;
        }
    }
    Dataset { x, labels, classes: spec.classes }.validate()
}

/// Concentric rings in 2-D: class p lives at radius p+1 with radial noise
/// sigma and uniform angle. Radially symmetric, so no linear map separates
/// the classes well.
pub fn concentric_rings(classes: usize, per_class: usize, sigma: f64, seed: u64) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::InvalidInput(format!("rings: need >= 2 classes, got {classes}")));
    }
    if per_class == 0 {
        return Err(Error::InvalidInput("rings: per_class must be positive".into()));
    }
    if sigma < 0.0 {
        return Err(Error::InvalidInput(format!("rings: sigma must be >= 0, got {sigma}")));
    }
    let mut rng = Rng::derive(seed, 0x0472);
    let n = classes * per_class;
    let mut x = Tensor2D::zeros(n, 2);
    let mut labels = Vec::with_capacity(n);
    let mut row = 0;
    for p in 0..classes {
        for _ in 0..per_class {
            let phi = rng.uniform(0.0, 2.0 * std::f64::consts::PI);
            let r = (p + 1) as f64 + sigma * rng.normal();
            x.set(row, 0, r * phi.cos());
            x.set(row, 1, r * phi.sin());
            labels.push(p);
            row += 1;
        }
    }
    Dataset { x, labels, classes }.validate()
}

// ---------------------------------------------------------------------------
// IDX files (the classic big-endian image/label container).
// ---------------------------------------------------------------------------

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    let end = offset + 4;
    if bytes.len() < end {
        return Err(Error::Format {
            offset: bytes.len() as u64,
            message: format!("file truncated while reading {what} (need bytes {offset}..{end})"),
        });
    }
    Ok(u32::from_be_bytes(bytes[offset..end].try_into().unwrap()))
}

/// Loads an IDX image/label pair. Pixels are scaled to [0,1] by /255; each
/// image becomes one flat row.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let img =
        fs::read(images_path).map_err(|e| Error::io(images_path.display().to_string(), e))?;
    let lab =
        fs::read(labels_path).map_err(|e| Error::io(labels_path.display().to_string(), e))?;

    let magic = be_u32(&img, 0, "image magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: format!("bad image magic 0x{magic:08x}, want 0x{IDX_IMAGES_MAGIC:08x}"),
        });
    }
    let n = be_u32(&img, 4, "image count")? as usize;
    let rows = be_u32(&img, 8, "image rows")? as usize;
    let cols = be_u32(&img, 12, "image cols")? as usize;
    let pixels = n * rows * cols;
    if img.len() != 16 + pixels {
        return Err(Error::Format {
            offset: img.len().min(16 + pixels) as u64,
            message: format!(
                "image payload is {} bytes, header {n}x{rows}x{cols} implies {}",
                img.len() - 16.min(img.len()),
                pixels
            ),
        });
    }

    let lmagic = be_u32(&lab, 0, "label magic")?;
    if lmagic != IDX_LABELS_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: format!("bad label magic 0x{lmagic:08x}, want 0x{IDX_LABELS_MAGIC:08x}"),
        });
    }
    let ln = be_u32(&lab, 4, "label count")? as usize;
    if lab.len() != 8 + ln {
        return Err(Error::Format {
            offset: lab.len().min(8 + ln) as u64,
            message: format!("label payload is {} bytes, header implies {ln}", lab.len() - 8.min(lab.len())),
        });
    }
    if ln != n {
        return Err(Error::InvalidInput(format!("{n} images but {ln} labels")));
    }
    if n == 0 {
        return Err(Error::InvalidInput("IDX pair holds zero samples".into()));
    }

    let data: Vec<f64> = img[16..].iter().map(|&b| b as f64 / 255.0).collect();
    let labels: Vec<usize> = lab[8..].iter().map(|&b| b as usize).collect();
    let classes = labels.iter().max().unwrap() + 1;
    Dataset { x: Tensor2D::from_vec(n, rows * cols, data)?, labels, classes: classes.max(2) }
        .validate()
}

/// Writes a dataset as an IDX pair with the given image geometry. Feature
/// values are clamped to [0,1] and quantized to u8, so a load/save/load
/// cycle is bit-exact. rows*cols must equal the feature width.
pub fn save_idx(ds: &Dataset, rows: usize, cols: usize, images_path: &Path, labels_path: &Path) -> Result<()> {
    if rows * cols != ds.dim() {
        return Err(Error::InvalidInput(format!(
            "save_idx: {rows}x{cols} geometry does not match {} features",
            ds.dim()
        )));
    }
    if ds.classes > 256 {
        return Err(Error::InvalidInput("save_idx: labels beyond u8 range".into()));
    }
    let mut img = Vec::with_capacity(16 + ds.len() * ds.dim());
    img.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    img.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    img.extend_from_slice(&(rows as u32).to_be_bytes());
    img.extend_from_slice(&(cols as u32).to_be_bytes());
    for v in ds.x.as_slice() {
        img.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
    }
    let mut lab = Vec::with_capacity(8 + ds.len());
    lab.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    lab.extend(ds.labels.iter().map(|&l| l as u8));
    fs::write(images_path, img).map_err(|e| Error::io(images_path.display().to_string(), e))?;
    fs::write(labels_path, lab).map_err(|e| Error::io(labels_path.display().to_string(), e))
}

// ---------------------------------------------------------------------------
// Normalization and batching.
// ---------------------------------------------------------------------------

/// Per-feature standardization fitted on the training split.
#[derive(Debug, Clone)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Fits mean and population std per column. Columns with std below 1e-12
    /// are left unscaled (std treated as 1) so constant features survive.
    pub fn fit(x: &Tensor2D) -> Result<Self> {
        if x.rows() == 0 {
            return Err(Error::InvalidInput("standardizer: empty matrix".into()));
        }
        let n = x.rows() as f64;
        let d = x.cols();
        let mut mean = vec![0.0; d];
        for i in 0..x.rows() {
            for (j, m) in mean.iter_mut().enumerate() {
                *m += x.get(i, j);
            }
        }
        for m in &mut mean {
            *m /= n;
        }
        let mut var = vec![0.0; d];
        for i in 0..x.rows() {
            for (j, v) in var.iter_mut().enumerate() {
                let c = x.get(i, j) - mean[j];
                *v += c * c;
            }
        }
        let std = var
            .iter()
            .map(|v| {
                let s = (v / n).sqrt();
                if s < 1e-12 {
                    1.0
                } else {
                    s
                }
            })
            .collect();
        Ok(Standardizer { mean, std })
    }

    pub fn apply(&self, x: &Tensor2D) -> Result<Tensor2D> {
        if x.cols() != self.mean.len() {
            return Err(Error::shape(
                "standardize",
                format!("{} columns vs {} fitted", x.cols(), self.mean.len()),
            ));
        }
        let mut out = x.clone();
        for i in 0..out.rows() {
            let row = out.row_mut(i);
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s;
            }
        }
        Ok(out)
    }
}

/// Deterministic epoch batching: the permutation is a pure function of
/// (seed, epoch), so any epoch can be replayed bit-exactly. The final batch
/// may be short; every index appears exactly once.
pub fn batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Result<Vec<Vec<usize>>> {
    if n == 0 {
        return Err(Error::InvalidInput("batches: empty dataset".into()));
    }
    if batch_size == 0 || batch_size > n {
        return Err(Error::InvalidInput(format!(
            "batches: batch_size {batch_size} out of range [1, {n}]"
        )));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    let mut rng = Rng::derive(seed, 0xba7c_0000 ^ epoch as u64);
    rng.shuffle(&mut perm);
    Ok(perm.chunks(batch_size).map(|c| c.to_vec()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::norm;
    use std::collections::BTreeSet;

    #[test]
    fn blobs_zero_sigma_sit_on_centers() {
        let spec =
            BlobSpec { classes: 3, per_class: 4, dim: 5, sigma: 0.0, center_radius: 2.0, seed: 1 };
        let ds = gaussian_blobs(&spec).unwrap();
        assert_eq!(ds.len(), 12);
        for i in 0..ds.len() {
            let p = ds.labels[i] as f64;
            let angle = 2.0 * std::f64::consts::PI * p / 3.0;
            let row = ds.x.row(i);
            assert!((row[0] - 2.0 * angle.cos()).abs() < 1e-12);
            assert!((row[1] - 2.0 * angle.sin()).abs() < 1e-12);
            assert!(row[2..].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn blobs_three_class_centers_are_equidistant() {
        let spec =
            BlobSpec { classes: 3, per_class: 1, dim: 2, sigma: 0.0, center_radius: 3.0, seed: 0 };
        let ds = gaussian_blobs(&spec).unwrap();
        let d01 = crate::tensor::dist(ds.x.row(0), ds.x.row(1));
        let d12 = crate::tensor::dist(ds.x.row(1), ds.x.row(2));
        let d02 = crate::tensor::dist(ds.x.row(0), ds.x.row(2));
        assert!((d01 - d12).abs() < 1e-12);
        assert!((d01 - d02).abs() < 1e-12);
    }

    #[test]
    fn blobs_reproducible_and_seed_sensitive() {
        let spec =
            BlobSpec { classes: 2, per_class: 10, dim: 3, sigma: 0.5, center_radius: 1.0, seed: 7 };
        let a = gaussian_blobs(&spec).unwrap();
        let b = gaussian_blobs(&spec).unwrap();
        assert_eq!(a.x, b.x);
        let c = gaussian_blobs(&BlobSpec { seed: 8, ..spec }).unwrap();
        assert_ne!(a.x, c.x);
    }

    #[test]
    fn rings_zero_sigma_exact_radii() {
        let ds = concentric_rings(2, 50, 0.0, 3).unwrap();
        for i in 0..ds.len() {
            let want = (ds.labels[i] + 1) as f64;
            assert!((norm(ds.x.row(i)) - want).abs() < 1e-12);
        }
    }

    #[test]
    fn rings_angles_cover_the_circle() {
        let ds = concentric_rings(2, 400, 0.0, 5).unwrap();
        // Quadrant histogram of the first ring should be roughly uniform.
        let mut quad = [0usize; 4];
        for i in 0..ds.len() {
            if ds.labels[i] != 0 {
                continue;
            }
            let (x, y) = (ds.x.get(i, 0), ds.x.get(i, 1));
            let q = match (x >= 0.0, y >= 0.0) {
                (true, true) => 0,
                (false, true) => 1,
                (false, false) => 2,
                (true, false) => 3,
            };
            quad[q] += 1;
        }
        for &c in &quad {
            assert!(c > 60, "quadrant counts {quad:?}");
        }
    }

    #[test]
    fn idx_roundtrip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let ip = dir.path().join("img.idx");
        let lp = dir.path().join("lab.idx");
        // 2 images of 2x2, pixel values on the u8 grid.
        let ds = Dataset {
            x: Tensor2D::from_rows(&[
                &[0.0, 1.0, 128.0 / 255.0, 3.0 / 255.0],
                &[255.0 / 255.0, 0.0, 77.0 / 255.0, 200.0 / 255.0],
            ])
            .unwrap(),
            labels: vec![1, 0],
            classes: 2,
        };
        save_idx(&ds, 2, 2, &ip, &lp).unwrap();
        let re = load_idx(&ip, &lp).unwrap();
        assert_eq!(re.x, ds.x);
        assert_eq!(re.labels, ds.labels);

        // Second cycle: still identical.
        let ip2 = dir.path().join("img2.idx");
        let lp2 = dir.path().join("lab2.idx");
        save_idx(&re, 2, 2, &ip2, &lp2).unwrap();
        assert_eq!(std::fs::read(&ip).unwrap(), std::fs::read(&ip2).unwrap());
        assert_eq!(std::fs::read(&lp).unwrap(), std::fs::read(&lp2).unwrap());
    }

    #[test]
    fn idx_bad_magic_names_offset() {
        let dir = tempfile::tempdir().unwrap();
        let ip = dir.path().join("img.idx");
        let lp = dir.path().join("lab.idx");
        let ds = Dataset {
            x: Tensor2D::from_rows(&[&[0.5]]).unwrap(),
            labels: vec![0],
            classes: 2,
        };
        save_idx(&ds, 1, 1, &ip, &lp).unwrap();
        let mut bytes = std::fs::read(&ip).unwrap();
        bytes[2] = 0x09;
        std::fs::write(&ip, bytes).unwrap();
        let err = load_idx(&ip, &lp).unwrap_err();
        match err {
            Error::Format { offset, message } => {
                assert_eq!(offset, 0);
                assert!(message.contains("magic"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn idx_truncation_and_count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let ip = dir.path().join("img.idx");
        let lp = dir.path().join("lab.idx");
        let ds = Dataset {
            x: Tensor2D::from_vec(3, 4, vec![0.2; 12]).unwrap(),
            labels: vec![0, 1, 1],
            classes: 2,
        };
        save_idx(&ds, 2, 2, &ip, &lp).unwrap();

        let bytes = std::fs::read(&ip).unwrap();
        std::fs::write(&ip, &bytes[..bytes.len() - 1]).unwrap();
        assert!(matches!(load_idx(&ip, &lp), Err(Error::Format { .. })));
        std::fs::write(&ip, &bytes).unwrap();

        // Drop one label: counts disagree.
        let lb = std::fs::read(&lp).unwrap();
        let mut short = lb.clone();
        short[7] = 2; // header says 2 labels
        short.truncate(8 + 2);
        std::fs::write(&lp, short).unwrap();
        let err = load_idx(&ip, &lp).unwrap_err();
        assert!(err.to_string().contains("3 images but 2 labels"), "{err}");
    }

    #[test]
    fn standardizer_zeroes_mean_and_unit_variance() {
        let x = Tensor2D::from_rows(&[&[1.0, 10.0], &[3.0, 10.0], &[5.0, 10.0]]).unwrap();
        let st = Standardizer::fit(&x).unwrap();
        let y = st.apply(&x).unwrap();
        for j in 0..2 {
            let mean: f64 = (0..3).map(|i| y.get(i, j)).sum::<f64>() / 3.0;
            assert!(mean.abs() < 1e-12);
        }
        // Constant column passes through centered but unscaled.
        assert_eq!(y.get(0, 1), 0.0);
        let var0: f64 = (0..3).map(|i| y.get(i, 0).powi(2)).sum::<f64>() / 3.0;
        assert!((var0 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn batches_partition_and_replay() {
        let a = batches(103, 20, 5, 3).unwrap();
        let b = batches(103, 20, 5, 3).unwrap();
        assert_eq!(a, b);
        let sizes: Vec<usize> = a.iter().map(|c| c.len()).collect();
        assert_eq!(sizes, vec![20, 20, 20, 20, 20, 3]);
        let all: BTreeSet<usize> = a.iter().flatten().copied().collect();
        assert_eq!(all.len(), 103);

        let other_epoch = batches(103, 20, 5, 4).unwrap();
        assert_ne!(a, other_epoch);
    }

    #[test]
    fn batch_size_full_is_one_permutation() {
        let a = batches(10, 10, 1, 0).unwrap();
        assert_eq!(a.len(), 1);
        let mut sorted = a[0].clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn batches_rejects_bad_sizes() {
        assert!(batches(10, 0, 1, 0).is_err());
        assert!(batches(10, 11, 1, 0).is_err());
        assert!(batches(0, 1, 1, 0).is_err());
    }
}
