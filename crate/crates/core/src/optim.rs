//! AdamW with decoupled weight decay.
//!
//! Decay multiplies parameters directly (theta *= 1 - lr*wd) before the
//! moment update and never enters the moment estimates; with weight_decay = 0
//! the step coincides with plain Adam. Moments are bias-corrected with the
//! shared step counter t, which starts at 1 on the first step.

use crate::autodiff::ParameterSet;
use crate::error::{Error, Result};
use crate::tensor::Tensor2D;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWParams {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWParams {
    fn default() -> Self {
        AdamWParams { lr: 1e-3, weight_decay: 0.5e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamWParams {
    // Negated comparisons so NaN fails validation along with out-of-range values.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config(format!(
                "betas must lie in [0,1), got ({}, {})",
                self.beta1, self.beta2
            )));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config(format!("eps must be positive, got {}", self.eps)));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config(format!(
                "weight decay must be nonnegative, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

/// First/second moment buffers, one pair per parameter slot.
#[derive(Debug, Clone)]
pub struct AdamWState {
    m: Vec<Tensor2D>,
    v: Vec<Tensor2D>,
    t: u64,
}

impl AdamWState {
    pub fn new(params: &ParameterSet) -> Self {
        let zeros: Vec<Tensor2D> = (0..params.len())
            .map(|i| {
                let (r, c) = params.value(i).shape();
                Tensor2D::zeros(r, c)
            })
            .collect();
        AdamWState { m: zeros.clone(), v: zeros, t: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// One AdamW step with a single learning rate for every parameter.
pub fn adamw_step(
    params: &mut ParameterSet,
    grads: &[Tensor2D],
    state: &mut AdamWState,
    hp: &AdamWParams,
) -> Result<()> {
    let lrs = vec![hp.lr; params.len()];
    adamw_step_grouped(params, grads, state, hp, &lrs)
}

/// One AdamW step with a per-parameter learning rate (the harness exempts
/// the final classifier from learning-rate halving). `lrs[i]` replaces
/// `hp.lr` for slot i in both the decay and the update.
pub fn adamw_step_grouped(
    params: &mut ParameterSet,
    grads: &[Tensor2D],
    state: &mut AdamWState,
    hp: &AdamWParams,
    lrs: &[f64],
) -> Result<()> {
    hp.validate()?;
    if grads.len() != params.len() || lrs.len() != params.len() {
        return Err(Error::InvalidInput(format!(
            "adamw_step: {} params, {} grads, {} lrs",
            params.len(),
            grads.len(),
            lrs.len()
        )));
    }
    for slot in 0..params.len() {
        if grads[slot].shape() != params.value(slot).shape() {
            return Err(Error::shape(
                "adamw_step",
                format!(
                    "grad {:?} vs param {} {:?}",
                    grads[slot].shape(),
                    params.name(slot),
                    params.value(slot).shape()
                ),
            ));
        }
        if !grads[slot].is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite gradient for parameter {}; step aborted",
                params.name(slot)
            )));
        }
    }

    state.t += 1;
    let bc1 = 1.0 - hp.beta1.powi(state.t as i32);
    let bc2 = 1.0 - hp.beta2.powi(state.t as i32);

    for slot in 0..params.len() {
        let lr = lrs[slot];
        let g = grads[slot].as_slice();
        let m = state.m[slot].as_mut_slice();
        let v = state.v[slot].as_mut_slice();
        let p = params.value_mut(slot).as_mut_slice();
        let decay = 1.0 - lr * hp.weight_decay;
        for k in 0..p.len() {
            p[k] *= decay;
            m[k] = hp.beta1 * m[k] + (1.0 - hp.beta1) * g[k];
            v[k] = hp.beta2 * v[k] + (1.0 - hp.beta2) * g[k] * g[k];
            let m_hat = m[k] / bc1;
            let v_hat = v[k] / bc2;
            p[k] -= lr * m_hat / (v_hat.sqrt() + hp.eps);
        }
    }
    Ok(())
}

/// Halved learning-rate factor: 0.5^k where k counts halvings at
/// start_epoch, start_epoch+every, ... Epochs before start_epoch get 1.
pub fn lr_halving_factor(epoch: usize, start_epoch: usize, every: usize) -> f64 {
    if epoch < start_epoch || every == 0 {
        1.0
    } else {
        0.5_f64.powi((1 + (epoch - start_epoch) / every) as i32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_param(v: f64) -> (ParameterSet, AdamWState) {
        let mut p = ParameterSet::new();
        p.push("w", Tensor2D::from_rows(&[&[v]]).unwrap()).unwrap();
        let st = AdamWState::new(&p);
        (p, st)
    }

    #[test]
    fn first_step_scalar_oracle() {
        // Hand-rolled reference: theta=1, g=0.5, lr=0.01, wd=0.1.
        let hp = AdamWParams { lr: 0.01, weight_decay: 0.1, ..Default::default() };
        let (mut p, mut st) = single_param(1.0);
        let g = vec![Tensor2D::from_rows(&[&[0.5]]).unwrap()];
        adamw_step(&mut p, &g, &mut st, &hp).unwrap();

        // Independent recomputation.
        let mut theta = 1.0_f64;
        theta *= 1.0 - 0.01 * 0.1;
        let m = 0.1_f64 * 0.5;
        let v = 0.001_f64 * 0.25;
        let m_hat = m / (1.0 - 0.9);
        let v_hat = v / (1.0 - 0.999);
        theta -= 0.01 * m_hat / (v_hat.sqrt() + 1e-8);

        assert!((p.value(0).get(0, 0) - theta).abs() < 1e-15);
    }

    #[test]
    fn first_step_sign_magnitude() {
        // With wd = 0 the first update is -lr * g / (|g| + eps).
        for &g0 in &[0.5, -2.0, 1e-3] {
            let hp = AdamWParams { lr: 0.01, weight_decay: 0.0, ..Default::default() };
            let (mut p, mut st) = single_param(0.3);
            let g = vec![Tensor2D::from_rows(&[&[g0]]).unwrap()];
            adamw_step(&mut p, &g, &mut st, &hp).unwrap();
            let want = 0.3 - 0.01 * g0 / (g0.abs() + 1e-8);
            assert!((p.value(0).get(0, 0) - want).abs() < 1e-12, "g0={g0}");
        }
    }

    #[test]
    fn zero_decay_coincides_with_adam() {
        // Reference Adam implemented inline; ten steps on a quadratic.
        let hp = AdamWParams { lr: 0.05, weight_decay: 0.0, ..Default::default() };
        let (mut p, mut st) = single_param(2.0);
        let (mut m, mut v) = (0.0_f64, 0.0_f64);
        let mut theta = 2.0_f64;
        for t in 1..=10 {
            let g0 = 2.0 * p.value(0).get(0, 0); // d/dx x^2 at current point
            let g = vec![Tensor2D::from_rows(&[&[g0]]).unwrap()];
            adamw_step(&mut p, &g, &mut st, &hp).unwrap();

            let gr = 2.0 * theta;
            m = 0.9 * m + 0.1 * gr;
            v = 0.999 * v + 0.001 * gr * gr;
            let m_hat = m / (1.0 - 0.9_f64.powi(t));
            let v_hat = v / (1.0 - 0.999_f64.powi(t));
            theta -= 0.05 * m_hat / (v_hat.sqrt() + 1e-8);

            assert!(
                (p.value(0).get(0, 0) - theta).abs() < 1e-14,
                "step {t}: {} vs {theta}",
                p.value(0).get(0, 0)
            );
        }
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let (mut p, mut st) = single_param(1.0);
        let g = vec![Tensor2D::from_rows(&[&[f64::NAN]]).unwrap()];
        let err = adamw_step(&mut p, &g, &mut st, &AdamWParams::default()).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
        assert!(err.to_string().contains('w'));
        // Parameter untouched by the aborted step.
        assert_eq!(p.value(0).get(0, 0), 1.0);
        assert_eq!(st.step_count(), 0);
    }

    #[test]
    fn decay_shrinks_without_gradient() {
        let hp = AdamWParams { lr: 0.1, weight_decay: 0.5, ..Default::default() };
        let (mut p, mut st) = single_param(1.0);
        let g = vec![Tensor2D::from_rows(&[&[0.0]]).unwrap()];
        adamw_step(&mut p, &g, &mut st, &hp).unwrap();
        // Pure decoupled decay: 1 * (1 - 0.1*0.5); zero grads add nothing.
        assert!((p.value(0).get(0, 0) - 0.95).abs() < 1e-15);
    }

    #[test]
    fn halving_schedule() {
        assert_eq!(lr_halving_factor(0, 250, 50), 1.0);
        assert_eq!(lr_halving_factor(249, 250, 50), 1.0);
        assert_eq!(lr_halving_factor(250, 250, 50), 0.5);
        assert_eq!(lr_halving_factor(299, 250, 50), 0.5);
        assert_eq!(lr_halving_factor(300, 250, 50), 0.25);
        assert_eq!(lr_halving_factor(499, 250, 50), 0.5_f64.powi(5));
    }

    #[test]
    fn grouped_rates_apply_per_slot() {
        let mut p = ParameterSet::new();
        p.push("a", Tensor2D::from_rows(&[&[1.0]]).unwrap()).unwrap();
        p.push("b", Tensor2D::from_rows(&[&[1.0]]).unwrap()).unwrap();
        let mut st = AdamWState::new(&p);
        let hp = AdamWParams { lr: 0.01, weight_decay: 0.0, ..Default::default() };
        let g = vec![
            Tensor2D::from_rows(&[&[1.0]]).unwrap(),
            Tensor2D::from_rows(&[&[1.0]]).unwrap(),
        ];
        adamw_step_grouped(&mut p, &g, &mut st, &hp, &[0.01, 0.002]).unwrap();
        let da = 1.0 - p.value(0).get(0, 0);
        let db = 1.0 - p.value(1).get(0, 0);
        assert!((da / db - 5.0).abs() < 1e-9, "da {da} db {db}");
    }
}
