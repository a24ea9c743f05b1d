//! Central finite differences for validating analytic gradients.
//!
//! This is the independent oracle for every differentiation path in the
//! crate: it only ever calls forward evaluations of a closure, never the
//! tape's backward pass.

/// Step used by the gradient suites: reliable at 64-bit, not at 32-bit.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Gradient of `f` at `x` by central differences with the given step.
pub fn central_diff<G>(f: &mut G, x: &[f64], step: f64) -> Vec<f64>
where
    G: FnMut(&[f64]) -> f64,
{
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + step;
        let hi = f(&probe);
        probe[i] = x[i] - step;
        let lo = f(&probe);
        probe[i] = x[i];
        grad[i] = (hi - lo) / (2.0 * step);
    }
    grad
}

/// `|a - b| / max(1, |a|, |b|)`, the comparison used by the gradient
/// suites (absolute near zero, relative for large values).
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs().max(b.abs())).max(1.0)
}

/// Largest elementwise [`rel_err`] between two gradients.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| rel_err(a, n))
        .fold(0.0, f64::max)
}
