//! Finite-difference verification of tape gradients.

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};

use super::data::{Param, Real};
use super::tape::{Tape, Tensor};

/// Outcome of a gradient check: the worst elementwise relative error and
/// where it occurred, plus the per-parameter worst errors for diagnostics.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// Differences below this count as agreement; see [`fd_noise_floor`].
    pub noise_floor: f64,
    /// Worst relative error per parameter, in parameter order.
    pub per_param: Vec<(String, f64)>,
}

/// Relative error with the denominator clamped at 1e-8 so near-zero
/// gradients do not blow up the ratio.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-8);
    (analytic - numeric).abs() / denom
}

/// Absolute uncertainty of a central difference at f64: the two function
/// values round to ulp(|f|)/2 each, so the quotient carries noise of order
/// eps_mach * |f| / (2 eps). The factor 16 gives headroom over measured
/// accumulation; a true gradient smaller than this cannot be distinguished
/// from zero by finite differences at this eps, and differences under the
/// floor say nothing about correctness.
pub fn fd_noise_floor(loss: f64, eps: f64) -> f64 {
    16.0 * f64::EPSILON * loss.abs().max(1.0) / (2.0 * eps)
}

/// Comparator used by every gradient check: relative error as in
/// [`relative_error`], with sub-noise differences counting as exact.
pub fn fd_error(analytic: f64, numeric: f64, noise_floor: f64) -> f64 {
    if (analytic - numeric).abs() <= noise_floor {
        0.0
    } else {
        relative_error(analytic, numeric)
    }
}

/// Compare tape gradients of a scalar function against central differences
/// `(f(p + eps) - f(p - eps)) / 2 eps`, elementwise over every parameter.
///
/// `f` must register each parameter it uses on the tape it is given (via
/// [`Tape::param`]) and return a scalar. Meaningful at f64 only; at f32 the
/// differences drown in rounding.
pub fn grad_check<T, F>(mut f: F, params: &mut [Param<T>], eps: T) -> Result<GradCheckReport>
where
    T: Real,
    F: FnMut(&mut Tape<T>, &[Param<T>]) -> Result<Tensor>,
{
    if eps <= T::zero() {
        return Err(Error::Config("grad_check: eps must be positive".into()));
    }

    let mut tape = Tape::new();
    let loss = f(&mut tape, params)?;
    if tape.data(loss).len() != 1 {
        return Err(Error::NonScalarLoss {
            numel: tape.data(loss).len(),
        });
    }
    let noise_floor = fd_noise_floor(tape.item(loss).to_f64(), eps.to_f64());
    tape.backward(loss)?;
    let analytic: Vec<Vec<T>> = params
        .iter()
        .map(|p| {
            tape.param_grad(&p.name)
                .unwrap_or_else(|| alloc::vec![T::zero(); p.value.numel()])
        })
        .collect();
    drop(tape);

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        noise_floor,
        per_param: Vec::new(),
    };

    for pi in 0..params.len() {
        let mut param_worst = 0.0f64;
        for j in 0..params[pi].value.numel() {
            let orig = params[pi].value.data()[j];
            params[pi].value.data_mut()[j] = orig + eps;
            let plus = eval_scalar(&mut f, params)?;
            params[pi].value.data_mut()[j] = orig - eps;
            let minus = eval_scalar(&mut f, params)?;
            params[pi].value.data_mut()[j] = orig;

            let numeric = (plus - minus).to_f64() / (2.0 * eps.to_f64());
            let a = analytic[pi][j].to_f64();
            let err = fd_error(a, numeric, noise_floor);
            if err > param_worst {
                param_worst = err;
            }
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst_param = params[pi].name.clone();
                report.worst_index = j;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
        report.per_param.push((params[pi].name.clone(), param_worst));
    }
    Ok(report)
}

fn eval_scalar<T, F>(f: &mut F, params: &[Param<T>]) -> Result<T>
where
    T: Real,
    F: FnMut(&mut Tape<T>, &[Param<T>]) -> Result<Tensor>,
{
    let mut tape = Tape::new();
    let loss = f(&mut tape, params)?;
    Ok(tape.item(loss))
}
