//! Two-component 1-D Gaussian mixture fit by EM, used to score how bimodal
//! each latent coordinate has become.

use crate::error::{Error, Result};
use crate::losses::log_sum_exp;

const VAR_FLOOR: f64 = 1e-12;
const LL_TOL: f64 = 1e-8;
const MAX_ITERS: usize = 500;

/// A fitted two-component mixture, components ordered so `mu1 <= mu2`.
#[derive(Debug, Clone, Copy)]
pub struct GmmFit {
    pub weight1: f64,
    pub mu1: f64,
    pub sigma1: f64,
    pub mu2: f64,
    pub sigma2: f64,
    /// Mean log-likelihood per sample at the final parameters.
    pub mean_loglik: f64,
    /// Whether EM reached the log-likelihood tolerance before the iteration cap.
    pub converged: bool,
    pub iterations: usize,
}

impl GmmFit {
    /// Separation of the two means in units of the average spread.
    pub fn peak_distance(&self) -> f64 {
        (self.mu2 - self.mu1).abs() / (0.5 * (self.sigma1 + self.sigma2))
    }

    pub fn mean_sigma(&self) -> f64 {
        0.5 * (self.sigma1 + self.sigma2)
    }
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let frac = pos - lo as f64;
    if lo + 1 >= sorted.len() {
        sorted[sorted.len() - 1]
    } else {
        sorted[lo] * (1.0 - frac) + sorted[lo + 1] * frac
    }
}

fn ln_normal(x: f64, mu: f64, var: f64) -> f64 {
    let d = x - mu;
    -0.5 * ((2.0 * std::f64::consts::PI * var).ln() + d * d / var)
}

/// EM fit of `0.5-ish / 0.5-ish` two-component mixture to `values`.
///
/// Initialisation: means at the 25th and 75th percentiles, equal weights,
/// shared variance from the overall spread. Variances are floored at 1e-12
/// throughout, so reported sigmas never drop below 1e-6. Stops when the mean
/// log-likelihood improves by less than 1e-8 or after 500 iterations.
pub fn fit_bimodal_gmm(values: &[f64]) -> Result<GmmFit> {
    if values.len() < 4 {
        return Err(Error::InvalidInput(format!(
            "gmm: need at least 4 values, got {}",
            values.len()
        )));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("gmm: non-finite value".into()));
    }
    let n = values.len();
    let nf = n as f64;

    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let mut mu = [percentile(&sorted, 0.25), percentile(&sorted, 0.75)];

    let mean: f64 = values.iter().sum::<f64>() / nf;
    let overall_var =
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / nf).max(VAR_FLOOR);
    let mut var = [overall_var, overall_var];
    let mut w = [0.5_f64, 0.5_f64];

    let mut prev_ll = f64::NEG_INFINITY;
    let mut mean_ll = prev_ll;
    let mut converged = false;
    let mut iterations = MAX_ITERS;
    let mut resp = vec![0.0_f64; n]; // responsibility of component 0

    for iter in 0..MAX_ITERS {
        // E-step in the log domain.
        let mut ll_total = 0.0;
        for (i, &x) in values.iter().enumerate() {
            let l0 = w[0].ln() + ln_normal(x, mu[0], var[0]);
            let l1 = w[1].ln() + ln_normal(x, mu[1], var[1]);
            let lse = log_sum_exp(&[l0, l1]);
            resp[i] = (l0 - lse).exp();
            ll_total += lse;
        }
        mean_ll = ll_total / nf;
        if (mean_ll - prev_ll).abs() < LL_TOL {
            converged = true;
            iterations = iter;
            break;
        }
        prev_ll = mean_ll;

        // M-step.
        let n0: f64 = resp.iter().sum();
        let n1 = nf - n0;
        for (c, (nk, rk)) in [(n0, true), (n1, false)].into_iter().enumerate() {
            if nk <= 0.0 {
                // Component starved of mass: keep its mean, pin variance at the floor.
                var[c] = VAR_FLOOR;
                w[c] = 0.0;
                continue;
            }
            let r = |i: usize| if rk { resp[i] } else { 1.0 - resp[i] };
            let m: f64 = values.iter().enumerate().map(|(i, &x)| r(i) * x).sum::<f64>() / nk;
            let v: f64 = values
                .iter()
                .enumerate()
                .map(|(i, &x)| r(i) * (x - m) * (x - m))
                .sum::<f64>()
                / nk;
            mu[c] = m;
            var[c] = v.max(VAR_FLOOR);
            w[c] = nk / nf;
        }
    }

    let (a, b) = if mu[0] <= mu[1] { (0, 1) } else { (1, 0) };
    Ok(GmmFit {
        weight1: w[a],
        mu1: mu[a],
        sigma1: var[a].sqrt(),
        mu2: mu[b],
        sigma2: var[b].sqrt(),
        mean_loglik: mean_ll,
        converged,
        iterations,
    })
}
