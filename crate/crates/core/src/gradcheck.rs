//! Finite-difference gradient verification.
//!
//! Training code in this crate backpropagates by hand, so every analytic
//! gradient is checked against a central-difference estimate on random
//! probes. The comparison uses a symmetric relative error with a floor so
//! that near-zero coordinate pairs do not blow up the ratio.

/// Central finite-difference gradient of a scalar function at `x`.
pub fn central_diff_grad<F>(mut f: F, x: &[f64], step: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + step;
        let up = f(&probe);
        probe[i] = x[i] - step;
        let down = f(&probe);
        probe[i] = x[i];
        grad[i] = (up - down) / (2.0 * step);
    }
    grad
}

/// Worst-case relative disagreement between two gradient vectors:
/// max_i |a_i - n_i| / max(|a_i|, |n_i|), with coordinates where both sides
/// are below `floor` treated as exact agreement.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    let mut worst = 0.0f64;
    for (&a, &n) in analytic.iter().zip(numeric) {
        if a.abs() <= floor && n.abs() <= floor {
            continue;
        }
        let rel = (a - n).abs() / a.abs().max(n.abs());
        worst = worst.max(rel);
    }
    worst
}

/// Standard probe settings: step 1e-5, near-zero floor 1e-8, tolerance 1e-4.
pub const FD_STEP: f64 = 1e-5;
pub const FD_FLOOR: f64 = 1e-8;
pub const FD_TOL: f64 = 1e-4;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recovers_the_gradient_of_a_smooth_function() {
        // f(x) = sum sin(x_i) + x_0 * x_1, with known gradient.
        let f = |x: &[f64]| x.iter().map(|v| v.sin()).sum::<f64>() + x[0] * x[1];
        let x = [0.3, -1.2, 2.0];
        let numeric = central_diff_grad(f, &x, FD_STEP);
        let analytic = [x[0].cos() + x[1], x[1].cos() + x[0], x[2].cos()];
        assert!(max_rel_error(&analytic, &numeric, FD_FLOOR) <= FD_TOL);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        let f = |x: &[f64]| x[0] * x[0];
        let x = [1.5];
        let numeric = central_diff_grad(f, &x, FD_STEP);
        let wrong = [2.0 * x[0] * 1.01];
        assert!(max_rel_error(&wrong, &numeric, FD_FLOOR) > FD_TOL);
    }

    #[test]
    fn near_zero_pairs_do_not_inflate_the_ratio() {
        let analytic = [1e-12, 1.0];
        let numeric = [-1e-12, 1.0];
        assert_eq!(max_rel_error(&analytic, &numeric, FD_FLOOR), 0.0);
    }
}
