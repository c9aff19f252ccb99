/// Central-difference gradient with a fixed step.
pub fn finite_diff(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    assert!(h > 0.0, "finite difference step must be positive");
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let hi = f(&probe);
            probe[i] = x[i] - h;
            let lo = f(&probe);
            probe[i] = x[i];
            (hi - lo) / (2.0 * h)
        })
        .collect()
}

/// Central differences with a per-coordinate step `rel * max(1, |x_i|)`.
pub fn finite_diff_scaled(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], rel: f64) -> Vec<f64> {
    assert!(rel > 0.0, "finite difference step must be positive");
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let h = rel * x[i].abs().max(1.0);
            probe[i] = x[i] + h;
            let hi = f(&probe);
            probe[i] = x[i] - h;
            let lo = f(&probe);
            probe[i] = x[i];
            (hi - lo) / (2.0 * h)
        })
        .collect()
}

/// `|a - b| / |b|` in the Euclidean norm; absolute when `b` vanishes.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let scale = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    if scale > 0.0 {
        diff / scale
    } else {
        diff
    }
}
