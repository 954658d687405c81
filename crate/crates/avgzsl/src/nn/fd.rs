//! Central finite differences, the independent oracle for every analytic
//! gradient in the crate.

/// Central-difference gradient of a scalar function at `theta`.
///
/// Uses a per-coordinate step h = eps * max(1, |theta_i|) with
/// eps = cbrt(f64::EPSILON) ~ 6e-6, the usual optimum for central
/// differences, giving ~1e-10 absolute truncation error on O(1) functions.
pub fn finite_diff_grad(f: &mut impl FnMut(&[f64]) -> f64, theta: &[f64]) -> Vec<f64> {
    let eps = f64::EPSILON.cbrt();
    let mut work = theta.to_vec();
    let mut grad = vec![0.0; theta.len()];
    for i in 0..theta.len() {
        let h = eps * theta[i].abs().max(1.0);
        work[i] = theta[i] + h;
        let f_plus = f(&work);
        work[i] = theta[i] - h;
        let f_minus = f(&work);
        work[i] = theta[i];
        grad[i] = (f_plus - f_minus) / (2.0 * h);
    }
    grad
}

/// Largest elementwise relative error between two gradient vectors.
///
/// The denominator is floored at `floor` so near-zero coordinates compare
/// absolutely instead of exploding the ratio.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recovers_quadratic_gradient() {
        let mut f = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>();
        let theta = [1.5, -2.0, 0.25];
        let g = finite_diff_grad(&mut f, &theta);
        for (gi, ti) in g.iter().zip(theta) {
            assert!((gi - 2.0 * ti).abs() < 1e-8);
        }
    }

    #[test]
    fn rel_error_uses_floor_near_zero() {
        let err = max_rel_error(&[0.0, 1.0], &[1e-9, 1.0], 1e-6);
        assert!(err < 2e-3);
    }
}
