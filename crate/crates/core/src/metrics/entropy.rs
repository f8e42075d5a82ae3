//! Nonparametric differential entropy from k-th nearest-neighbour distances.
//!
//! All special functions are evaluated at integer or half-integer arguments
//! only, where exact finite sums exist — no series approximations.

use crate::error::{Error, Result};
use crate::tensor::Tensor2D;

const EULER_MASCHERONI: f64 = 0.5772156649015329;

/// digamma(n) for integer n >= 1: psi(n) = -gamma + H_{n-1}.
pub fn digamma_int(n: usize) -> f64 {
    assert!(n >= 1, "digamma_int needs n >= 1");
    let mut h = 0.0;
    for j in 1..n {
        h += 1.0 / j as f64;
    }
    h - EULER_MASCHERONI
}

/// ln(n!) as a plain sum of logs.
fn ln_factorial(n: usize) -> f64 {
    (2..=n).map(|j| (j as f64).ln()).sum()
}

/// ln Gamma(x) where x = `twice_x`/2 must be a positive integer or
/// half-integer. Integer case: ln((x-1)!). Half-integer case uses
/// Gamma(m + 1/2) = (2m)! / (4^m m!) * sqrt(pi).
pub fn ln_gamma_int_or_half(twice_x: usize) -> f64 {
    assert!(twice_x >= 1, "argument must be positive");
    if twice_x.is_multiple_of(2) {
        ln_factorial(twice_x / 2 - 1)
    } else {
        let m = (twice_x - 1) / 2;
        ln_factorial(2 * m) - (m as f64) * 4.0_f64.ln() - ln_factorial(m)
            + 0.5 * std::f64::consts::PI.ln()
    }
}

/// ln of the volume of the unit ball in `p` dimensions:
/// ln V_p = (p/2) ln pi - ln Gamma(p/2 + 1).
pub fn ln_unit_ball_volume(p: usize) -> f64 {
    (p as f64) / 2.0 * std::f64::consts::PI.ln() - ln_gamma_int_or_half(p + 2)
}

/// Kozachenko-Leonenko differential entropy of the rows of `z`, divided by
/// the dimension so values are comparable across latent widths.
///
/// H_hat = psi(N) - psi(k) + ln V_P + (P/N) * sum_i ln r_i, with r_i the
/// distance from row i to its k-th nearest other row, clamped below at
/// 1e-30 so duplicate points cannot produce -inf.
pub fn kl_entropy_per_dim(z: &Tensor2D, k: usize) -> Result<f64> {
    let n = z.rows();
    let p = z.cols();
    if k == 0 {
        return Err(Error::InvalidInput("kl_entropy: k must be >= 1".into()));
    }
    if n <= k {
        return Err(Error::InvalidInput(format!(
            "kl_entropy: need more than k={k} samples, got {n}"
        )));
    }
    if p == 0 {
        return Err(Error::InvalidInput("kl_entropy: zero-dimensional samples".into()));
    }

    let mut sum_ln_r = 0.0;
    let mut dists = vec![0.0_f64; n - 1];
    for i in 0..n {
        let zi = z.row(i);
        let mut idx = 0;
        for j in 0..n {
            if j == i {
                continue;
            }
            let zj = z.row(j);
            let mut d2 = 0.0;
            for c in 0..p {
                let d = zi[c] - zj[c];
                d2 += d * d;
            }
            dists[idx] = d2;
            idx += 1;
        }
        // k-th smallest squared distance; select_nth avoids a full sort.
        let (_, kth, _) = dists.select_nth_unstable_by(k - 1, |a, b| a.total_cmp(b));
        let r = kth.sqrt().max(1e-30);
        sum_ln_r += r.ln();
    }

    let h = digamma_int(n) - digamma_int(k)
        + ln_unit_ball_volume(p)
        + (p as f64) / (n as f64) * sum_ln_r;
    Ok(h / p as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn digamma_small_values() {
        // psi(1) = -gamma, psi(2) = 1 - gamma, psi(5) = 25/12 - gamma.
        assert!((digamma_int(1) + EULER_MASCHERONI).abs() < 1e-15);
        assert!((digamma_int(2) - (1.0 - EULER_MASCHERONI)).abs() < 1e-15);
        assert!((digamma_int(5) - (25.0 / 12.0 - EULER_MASCHERONI)).abs() < 1e-14);
    }

    #[test]
    fn unit_ball_volumes() {
        // V_1 = 2, V_2 = pi, V_3 = 4 pi / 3, V_4 = pi^2 / 2.
        let pi = std::f64::consts::PI;
        assert!((ln_unit_ball_volume(1) - 2.0_f64.ln()).abs() < 1e-14);
        assert!((ln_unit_ball_volume(2) - pi.ln()).abs() < 1e-14);
        assert!((ln_unit_ball_volume(3) - (4.0 * pi / 3.0).ln()).abs() < 1e-14);
        assert!((ln_unit_ball_volume(4) - (pi * pi / 2.0).ln()).abs() < 1e-14);
    }

    #[test]
    fn gaussian_entropy_close_to_exact() {
        // Standard 2-D normal: H/dim = 0.5 * ln(2 pi e) = 1.4189385332046727.
        let mut rng = Rng::seed(405);
        let n = 1200;
        let z = Tensor2D::from_vec(n, 2, (0..2 * n).map(|_| rng.normal()).collect()).unwrap();
        let h = kl_entropy_per_dim(&z, 20).unwrap();
        assert!(
            (h - 1.4189385332046727).abs() < 0.12,
            "estimate {h} too far from Gaussian entropy"
        );
    }

    #[test]
    fn uniform_square_entropy_close_to_zero() {
        let mut rng = Rng::seed(406);
        let n = 1200;
        let z = Tensor2D::from_vec(n, 2, (0..2 * n).map(|_| rng.next_f64()).collect()).unwrap();
        let h = kl_entropy_per_dim(&z, 20).unwrap();
        assert!(h.abs() < 0.12, "uniform estimate {h} should be near 0");
    }

    #[test]
    fn collapsed_cloud_has_very_negative_entropy() {
        // All points identical: every r_i hits the clamp, entropy goes to the floor.
        let z = Tensor2D::from_vec(30, 3, vec![1.0; 90]).unwrap();
        let h = kl_entropy_per_dim(&z, 5).unwrap();
        assert!(h < -20.0, "degenerate cloud should report {h} << 0");
    }

    #[test]
    fn too_few_samples_rejected() {
        let z = Tensor2D::from_vec(5, 2, vec![0.5; 10]).unwrap();
        assert!(kl_entropy_per_dim(&z, 5).is_err());
        assert!(kl_entropy_per_dim(&z, 0).is_err());
        assert!(kl_entropy_per_dim(&z, 4).is_ok());
    }
}
