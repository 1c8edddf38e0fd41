//! Central finite differences, the reference oracle for every backward rule.

/// Central-difference gradient of `f` at `x`.
pub fn central_diff(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
    assert!(step > 0.0, "central_diff: step must be positive");
    let mut g = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + step;
        let fp = f(&probe);
        probe[i] = x[i] - step;
        let fm = f(&probe);
        probe[i] = x[i];
        g[i] = (fp - fm) / (2.0 * step);
    }
    g
}

/// Five-point central-difference gradient, truncation O(h^4). Preferred for
/// high-curvature functions (chained sine layers) where the three-point
/// stencil's O(h^2) truncation dominates the comparison.
pub fn central_diff4(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
    assert!(step > 0.0, "central_diff4: step must be positive");
    let mut g = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        let mut at = |d: f64| {
            probe[i] = x[i] + d;
            let v = f(&probe);
            probe[i] = x[i];
            v
        };
        let f1 = at(-2.0 * step);
        let f2 = at(-step);
        let f3 = at(step);
        let f4 = at(2.0 * step);
        g[i] = (f1 - 8.0 * f2 + 8.0 * f3 - f4) / (12.0 * step);
    }
    g
}

/// Worst relative disagreement between two gradients. Differences below
/// `floor` in magnitude on both sides compare absolutely against `floor`.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(
        analytic.len(),
        numeric.len(),
        "max_rel_err: lengths differ ({} vs {})",
        analytic.len(),
        numeric.len()
    );
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}
