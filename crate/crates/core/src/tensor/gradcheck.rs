/// Denominator floor for [`rel_err`], so that components whose true gradient
/// is (near) zero are compared on an absolute scale.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// `|a - b| / max(|a|, |b|, REL_ERR_FLOOR)`
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERR_FLOOR)
}

/// Compares the analytic gradient returned by `f` at `x` with central
/// differences of step `eps` in every coordinate. Returns the largest
/// [`rel_err`].
pub fn finite_diff_check<F>(mut f: F, x: &[f64], eps: f64) -> f64
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let (_, analytic) = f(x);
    assert_eq!(analytic.len(), x.len(), "gradient length must match input");
    let mut probe = x.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        probe[i] = x[i] + eps;
        let (hi, _) = f(&probe);
        probe[i] = x[i] - eps;
        let (lo, _) = f(&probe);
        probe[i] = x[i];
        let numeric = (hi - lo) / (2.0 * eps);
        worst = worst.max(rel_err(analytic[i], numeric));
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_wrong_gradients() {
        let f = |x: &[f64]| (x[0] * x[0] + x[1].sin(), vec![2.0 * x[0], x[1].cos()]);
        assert!(finite_diff_check(f, &[0.3, -1.2], 1e-5) < 1e-8);
        let wrong = |x: &[f64]| (x[0] * x[0], vec![x[0]]);
        assert!(finite_diff_check(wrong, &[0.5], 1e-5) > 0.4);
    }
}
