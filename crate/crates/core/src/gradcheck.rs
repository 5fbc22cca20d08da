//! Central-difference gradient checking.

/// Numerical gradient of `f` at `x` by central differences with step `h`.
pub fn numerical_gradient(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `‖a - n‖₂ / max(‖a‖₂, ‖n‖₂)`, or 0 when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let scale = crate::math::norm(analytic).max(crate::math::norm(numeric));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Compare an analytic gradient against central differences of `f`.
pub fn check(f: impl FnMut(&[f64]) -> f64, x: &[f64], analytic: &[f64], h: f64) -> f64 {
    relative_error(analytic, &numerical_gradient(f, x, h))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cubic_gradient_matches() {
        let f = |x: &[f64]| x[0].powi(3) + 2.0 * x[0] * x[1];
        let x = [1.3, -0.4];
        let analytic = [3.0 * 1.3f64.powi(2) + 2.0 * -0.4, 2.0 * 1.3];
        assert!(check(f, &x, &analytic, 1e-5) < 1e-8);
        assert!(check(f, &x, &[0.0, 0.0], 1e-5) > 0.9);
    }
}
