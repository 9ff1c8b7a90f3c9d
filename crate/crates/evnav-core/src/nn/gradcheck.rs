//! Central finite-difference gradient checking.
//!
//! Used by unit and integration tests; runs in double precision with step
//! 1e-5. A check passes when |analytic - numeric| <= tol * max(1, |analytic|,
//! |numeric|).

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

/// Central finite-difference derivative of `f` at `x[i]` for every i.
pub fn numeric_gradient(x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut g = Vec::with_capacity(x.len());
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + FD_STEP;
        let hi = f(&probe);
        probe[i] = orig - FD_STEP;
        let lo = f(&probe);
        probe[i] = orig;
        g.push((hi - lo) / (2.0 * FD_STEP));
    }
    g
}

/// Worst relative error between analytic and numeric gradients.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / 1f64.max(a.abs()).max(n.abs()))
        .fold(0.0, f64::max)
}

/// Asserts agreement; panics with the offending index on failure.
pub fn assert_gradients_match(analytic: &[f64], numeric: &[f64], context: &str) {
    assert_eq!(analytic.len(), numeric.len(), "{context}: length mismatch");
    for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        let rel = (a - n).abs() / 1f64.max(a.abs()).max(n.abs());
        assert!(
            rel <= FD_TOL,
            "{context}: gradient {i} analytic {a} vs numeric {n} (rel {rel:.3e})"
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        // f(x) = sum x_i^2, df/dx_i = 2 x_i.
        let x = vec![0.5, -1.25, 3.0];
        let num = numeric_gradient(&x, |v| v.iter().map(|a| a * a).sum());
        let ana: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        assert_gradients_match(&ana, &num, "quadratic");
    }

    #[test]
    fn detects_wrong_gradient() {
        let x = vec![1.0];
        let num = numeric_gradient(&x, |v| v[0] * v[0]);
        assert!(max_relative_error(&[3.0], &num) > FD_TOL);
    }
}
