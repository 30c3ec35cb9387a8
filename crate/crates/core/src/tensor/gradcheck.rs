// SPDX-License-Identifier: MIT OR Apache-2.0

use crate::error::{Error, Result};

/// Central-difference gradient `(f(x + h e_i) - f(x - h e_i)) / 2h`.
///
/// Unreliable at kinks of `f` (for example `|x|` at 0), where it returns the
/// average of the one-sided slopes.
pub fn finite_diff_gradient<F>(mut f: F, at: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if h.is_nan() || h <= 0.0 {
        return Err(Error::Usage(format!(
            "finite difference step must be > 0, got {h}"
        )));
    }
    let mut x = at.to_vec();
    let mut grad = Vec::with_capacity(at.len());
    for i in 0..at.len() {
        let orig = x[i];
        x[i] = orig + h;
        let plus = f(&x);
        x[i] = orig - h;
        let minus = f(&x);
        x[i] = orig;
        grad.push((plus - minus) / (2.0 * h));
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let g = finite_diff_gradient(|x| x[0] * x[0], &[3.0], 1e-6).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn constant_function() {
        let g = finite_diff_gradient(|_| 4.2, &[1.0, -2.0, 0.5], 1e-6).unwrap();
        assert_eq!(g, vec![0.0; 3]);
    }

    #[test]
    fn abs_at_kink_averages_one_sided_slopes() {
        let g = finite_diff_gradient(|x| x[0].abs(), &[0.0], 1e-6).unwrap();
        assert_eq!(g[0], 0.0);
    }

    #[test]
    fn rejects_non_positive_step() {
        assert!(finite_diff_gradient(|x| x[0], &[0.0], 0.0).is_err());
    }
}
