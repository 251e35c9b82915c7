//! Central finite-difference utilities for verifying analytic gradients.
//!
//! Used by the test suites; kept in the library so unit and integration
//! tests check the same arithmetic.

/// Central difference `(f(x+h) - f(x-h)) / 2h` per coordinate.
pub fn central_difference<F>(mut f: F, x: &[f64], h: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut pt = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = pt[i];
        pt[i] = orig + h;
        let fp = f(&pt);
        pt[i] = orig - h;
        let fm = f(&pt);
        pt[i] = orig;
        out.push((fp - fm) / (2.0 * h));
    }
    out
}

/// Worst relative error between an analytic gradient and a numeric one,
/// with the denominator floored so near-zero entries compare absolutely.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_derivative() {
        let g = central_difference(|x| x[0] * x[0], &[3.0], 1e-5);
        assert!((g[0] - 6.0).abs() < 1e-8);
    }

    #[test]
    fn rel_error_floor() {
        assert!(max_rel_error(&[0.0], &[1e-9]) < 1e-2);
        assert!(max_rel_error(&[1.0], &[1.1]) > 0.05);
    }
}
