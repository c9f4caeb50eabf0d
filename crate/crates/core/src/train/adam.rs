//! Adam with the inverse-square-root warmup schedule.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;


use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::{fmath, Real};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    /// Multiplier on the schedule; peak learning rate is
    /// `lr_scale / sqrt(warmup)`.
    pub lr_scale: f64,
    pub warmup: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            lr_scale: 0.06,
            warmup: 400,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
        }
    }
}

/// `lr_scale * min(step^-0.5, step * warmup^-1.5)`: linear warmup into an
/// inverse-square-root decay, peaking exactly at `step == warmup`.
pub fn lr_at(hyper: &AdamHyper, step: u64) -> f64 {
    let s = step.max(1) as f64;
    let w = hyper.warmup.max(1) as f64;
    hyper.lr_scale * fmath::powf(s, -0.5).min(s * fmath::powf(w, -1.5))
}

/// First/second moment accumulators, keyed by parameter name.
#[derive(Clone, Debug, Default)]
pub struct OptimState<T> {
    pub step: u64,
    moments: BTreeMap<String, (Vec<T>, Vec<T>)>,
}

impl<T: Real> OptimState<T> {
    pub fn new() -> Self {
        Self {
            step: 0,
            moments: BTreeMap::new(),
        }
    }
}

/// One Adam update over every model parameter. Gradients are looked up by
/// name; a missing entry counts as zero. A non-finite gradient aborts,
/// naming the parameter.
pub fn adam_step<T: Real>(
    model: &mut Model<T>,
    grads: &BTreeMap<String, Vec<T>>,
    state: &mut OptimState<T>,
    hyper: &AdamHyper,
) -> Result<()> {
    state.step += 1;
    let lr = T::from_f64(lr_at(hyper, state.step));
    let b1 = T::from_f64(hyper.beta1);
    let b2 = T::from_f64(hyper.beta2);
    let eps = T::from_f64(hyper.eps);
    let bc1 = T::one() - T::from_f64(fmath::powi(hyper.beta1, state.step as i32));
    let bc2 = T::one() - T::from_f64(fmath::powi(hyper.beta2, state.step as i32));

    for p in model.named_params_mut() {
        let n = p.value.numel();
        let zero;
        let g = match grads.get(&p.name) {
            Some(g) => g.as_slice(),
            None => {
                zero = vec![T::zero(); n];
                zero.as_slice()
            }
        };
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient {
                param: p.name.clone(),
            });
        }
        let (m, v) = state
            .moments
            .entry(p.name.clone())
            .or_insert_with(|| (vec![T::zero(); n], vec![T::zero(); n]));
        let data = p.value.data_mut();
        for i in 0..n {
            m[i] = b1 * m[i] + (T::one() - b1) * g[i];
            v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
