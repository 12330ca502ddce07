//! Central finite differences, used to cross-check tape gradients.

use crate::error::Result;

/// Central-difference gradient of a scalar function at `x` with step `h`.
pub fn numeric_gradient(
    mut f: impl FnMut(&[f64]) -> Result<f64>,
    x: &[f64],
    h: f64,
) -> Result<Vec<f64>> {
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let up = f(&probe)?;
        probe[i] = orig - h;
        let down = f(&probe)?;
        probe[i] = orig;
        out.push((up - down) / (2.0 * h));
    }
    Ok(out)
}

/// `|a - n| / max(|a|, |n|, floor)`. The floor keeps entries that should
/// vanish from being compared relative to rounding noise.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Largest [`relative_error`] across two gradient vectors, with the floor
/// set to `1e-3` of the largest numeric entry.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = numeric.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let floor = (1e-3 * scale).max(1e-300);
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| relative_error(a, n, floor))
        .fold(0.0, f64::max)
}
