//! Finite-difference oracles for gradient verification.
//!
//! These helpers never touch the tape's backward pass; they only re-evaluate
//! a scalar function at perturbed inputs, so tests can hold the reverse-mode
//! gradients against an independent reference.

/// Central-difference gradient of `eval` at `x` with step `h`.
pub fn central_diff(eval: &dyn Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut xs = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = xs[i];
        xs[i] = orig + h;
        let up = eval(&xs);
        xs[i] = orig - h;
        let down = eval(&xs);
        xs[i] = orig;
        out.push((up - down) / (2.0 * h));
    }
    out
}

/// Central difference along a single coordinate.
pub fn central_diff_at(eval: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], i: usize, h: f64) -> f64 {
    let mut xs = x.to_vec();
    let orig = xs[i];
    xs[i] = orig + h;
    let up = eval(&xs);
    xs[i] = orig - h;
    let down = eval(&xs);
    (up - down) / (2.0 * h)
}

/// Max over coordinates of `|a - b| / max(|a|, |b|, 1)`.
pub fn max_rel_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1.0))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn central_diff_matches_polynomial_derivative() {
        let f = |x: &[f64]| x[0] * x[0] * x[0] + 2.0 * x[1];
        let g = central_diff(&f, &[2.0, 5.0], 1e-5);
        assert!((g[0] - 12.0).abs() < 1e-8);
        assert!((g[1] - 2.0).abs() < 1e-8);
    }
}
