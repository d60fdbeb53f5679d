//! Independent gradient verification via central finite differences.
//!
//! Kept in the library (not under `cfg(test)`) so downstream code can
//! gradient-check custom losses the same way the built-in tests do.

/// Central-difference gradient of scalar `f` at `x0` with step `h`.
pub fn finite_diff_grad(x0: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut g = vec![0.0; x0.len()];
    let mut x = x0.to_vec();
    for i in 0..x0.len() {
        x[i] = x0[i] + h;
        let fp = f(&x);
        x[i] = x0[i] - h;
        let fm = f(&x);
        x[i] = x0[i];
        g[i] = (fp - fm) / (2.0 * h);
    }
    g
}

/// Worst relative error between two gradient vectors.
///
/// The denominator is floored at 1e-4 so near-zero entries are compared
/// absolutely at that scale instead of dividing by noise.
pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "gradient length mismatch");
    let mut worst: f64 = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        let denom = x.abs().max(y.abs()).max(1e-4);
        worst = worst.max((x - y).abs() / denom);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_recovered() {
        // f(x) = sum(x_i^2), grad = 2x
        let x0 = [0.5, -1.25, 3.0];
        let g = finite_diff_grad(&x0, 1e-6, |x| x.iter().map(|v| v * v).sum());
        let want = [1.0, -2.5, 6.0];
        assert!(max_rel_err(&g, &want) < 1e-9, "{g:?}");
    }

    #[test]
    fn rel_err_floors_near_zero_entries() {
        assert!(max_rel_err(&[1e-9], &[0.0]) < 1e-4);
        assert!(max_rel_err(&[1.0], &[1.0001]) < 1.1e-4);
        assert!(max_rel_err(&[1.0], &[1.01]) > 9e-3);
    }
}
