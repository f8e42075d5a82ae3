//! Symmetric eigendecomposition (cyclic Jacobi) and the PSD pseudoinverse
//! built on it. Covariance matrices here are tiny (latent dims), so Jacobi's
//! robustness beats anything fancier.

use crate::error::{Error, Result};
use crate::tensor::Tensor2D;

/// Eigenvalues and eigenvectors (as columns) of a symmetric matrix.
/// Unsorted; pairs correspond by index.
pub fn symmetric_eigen(a: &Tensor2D) -> Result<(Vec<f64>, Tensor2D)> {
    let n = a.rows();
    if a.cols() != n {
        return Err(Error::shape("symmetric_eigen", format!("{:?} not square", a.shape())));
    }
    let scale = a.as_slice().iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    for i in 0..n {
        for j in (i + 1)..n {
            if (a.get(i, j) - a.get(j, i)).abs() > 1e-9 * scale.max(1.0) {
                return Err(Error::InvalidInput(format!(
                    "symmetric_eigen: entry ({i},{j}) asymmetric: {} vs {}",
                    a.get(i, j),
                    a.get(j, i)
                )));
            }
        }
    }

    let mut m = a.clone();
    let mut v = Tensor2D::identity(n);
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += m.get(i, j) * m.get(i, j);
            }
        }
        if off.sqrt() <= 1e-14 * scale.max(f64::MIN_POSITIVE) {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m.get(p, q);
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let app = m.get(p, p);
                let aqq = m.get(q, q);
                let theta = (aqq - app) / (2.0 * apq);
                // tan of the rotation; the small root keeps |t| <= 1.
                let t = if theta.abs() > 1e150 {
                    1.0 / (2.0 * theta)
                } else {
                    theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;

                for k in 0..n {
                    let mkp = m.get(k, p);
                    let mkq = m.get(k, q);
                    m.set(k, p, c * mkp - s * mkq);
                    m.set(k, q, s * mkp + c * mkq);
                }
                for k in 0..n {
                    let mpk = m.get(p, k);
                    let mqk = m.get(q, k);
                    m.set(p, k, c * mpk - s * mqk);
                    m.set(q, k, s * mpk + c * mqk);
                }
                for k in 0..n {
                    let vkp = v.get(k, p);
                    let vkq = v.get(k, q);
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }
    let vals = (0..n).map(|i| m.get(i, i)).collect();
    Ok((vals, v))
}

/// Moore-Penrose pseudoinverse of a symmetric PSD matrix via the spectral
/// decomposition. Eigenvalues at or below `rel_cutoff` times the largest
/// (in magnitude) are treated as exactly zero.
pub fn pinv_psd(a: &Tensor2D, rel_cutoff: f64) -> Result<Tensor2D> {
    let (vals, vecs) = symmetric_eigen(a)?;
    let n = vals.len();
    let max = vals.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let mut out = Tensor2D::zeros(n, n);
    if max == 0.0 {
        return Ok(out);
    }
    for (k, &lam) in vals.iter().enumerate() {
        if lam <= rel_cutoff * max {
            continue; // null direction (negatives are rounding noise on PSD input)
        }
        let inv = 1.0 / lam;
        for i in 0..n {
            let vik = vecs.get(i, k);
            if vik == 0.0 {
                continue;
            }
            for j in 0..n {
                out.set(i, j, out.get(i, j) + inv * vik * vecs.get(j, k));
            }
        }
    }
    Ok(out)
}

pub fn trace(a: &Tensor2D) -> f64 {
    (0..a.rows().min(a.cols())).map(|i| a.get(i, i)).sum()
}
