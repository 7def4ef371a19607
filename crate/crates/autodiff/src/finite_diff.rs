//! Central finite-difference gradient checking.

use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;
/// Denominator floor for relative error, so gradients that are both
/// essentially zero do not divide roundoff by roundoff.
pub const REL_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Central differences of `f` with respect to every element of `inputs[which]`.
pub fn numeric_grad(
    f: &mut dyn FnMut(&[Tensor]) -> f64,
    inputs: &[Tensor],
    which: usize,
    step: f64,
) -> Vec<f64> {
    let mut work = inputs.to_vec();
    (0..inputs[which].numel())
        .map(|i| {
            let orig = inputs[which].data()[i];
            work[which].data_mut()[i] = orig + step;
            let up = f(&work);
            work[which].data_mut()[i] = orig - step;
            let down = f(&work);
            work[which].data_mut()[i] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// Largest relative error between two gradient vectors.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| relative_error(*a, *n))
        .fold(0.0, f64::max)
}
