//! Central finite-difference gradient checks.
//!
//! These helpers only ever evaluate the function being checked, so they stay
//! independent of the reverse-mode code they are used to verify.

/// Default probe step.
pub const STEP: f64 = 1e-5;

/// Central difference of `f` at `x` along coordinate `i`.
pub fn central_difference(f: &mut impl FnMut(&[f64]) -> f64, x: &[f64], i: usize, h: f64) -> f64 {
    let mut probe = x.to_vec();
    probe[i] = x[i] + h;
    let plus = f(&probe);
    probe[i] = x[i] - h;
    let minus = f(&probe);
    (plus - minus) / (2.0 * h)
}

/// Full numerical gradient of `f` at `x`.
pub fn numerical_gradient(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| central_difference(&mut f, x, i, h))
        .collect()
}

/// Relative error `|a - b| / max(|a|, |b|, floor)`.
///
/// The floor keeps gradients that are zero up to rounding from dominating the
/// comparison.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Largest relative error over paired slices.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| relative_error(*a, *n, floor))
        .fold(0.0, f64::max)
}
