//! Central finite differences, the independent oracle for every analytic
//! gradient in this crate. Deliberately knows nothing about tapes: it only
//! re-evaluates a scalar-valued closure under per-element perturbation.

use super::Tensor;
use crate::error::Result;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Central-difference gradient of `f` at `x`, one closure call pair per
/// element.
pub fn finite_difference_grad(
    x: &Tensor,
    step: f64,
    mut f: impl FnMut(&Tensor) -> Result<f64>,
) -> Result<Vec<f64>> {
    let mut grad = vec![0.0; x.numel()];
    let base = x.data().to_vec();
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += step;
        let mut minus = base.clone();
        minus[i] -= step;
        let fp = f(&Tensor::from_vec(plus, x.shape())?)?;
        let fm = f(&Tensor::from_vec(minus, x.shape())?)?;
        grad[i] = (fp - fm) / (2.0 * step);
    }
    Ok(grad)
}

/// Worst-element error between an analytic gradient and its finite-difference
/// estimate, normalized by the gradient scale.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let scale = numeric
        .iter()
        .chain(analytic.iter())
        .fold(0.0_f64, |m, &v| m.max(v.abs()))
        .max(1e-10);
    analytic
        .iter()
        .zip(numeric.iter())
        .fold(0.0_f64, |m, (&a, &n)| m.max((a - n).abs()))
        / scale
}
