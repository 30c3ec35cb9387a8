// SPDX-License-Identifier: MIT OR Apache-2.0

//! Proximal operators of the sparse group lasso and step-size schedules.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check_tau(tau: f64) -> Result<()> {
    if !tau.is_finite() || tau < 0.0 {
        return Err(Error::Usage(format!(
            "threshold must be finite and >= 0, got {tau}"
        )));
    }
    Ok(())
}

/// `sign(z) * max(|z| - tau, 0)`, the prox of `tau |.|_1`. Entries with
/// `|z_i| <= tau` become exactly `0.0`.
pub fn soft_threshold(z: &[f64], tau: f64) -> Result<Vec<f64>> {
    check_tau(tau)?;
    Ok(z.iter().map(|&v| soft_threshold_scalar(v, tau)).collect())
}

fn soft_threshold_scalar(v: f64, tau: f64) -> f64 {
    let mag = v.abs() - tau;
    if mag > 0.0 {
        mag.copysign(v)
    } else {
        0.0
    }
}

/// `(1 - tau / |z|_2)_+ z`, the prox of `tau |.|_2`. The whole vector is
/// exactly zero when `|z|_2 <= tau`.
pub fn group_prox(z: &[f64], tau: f64) -> Result<Vec<f64>> {
    check_tau(tau)?;
    if tau == 0.0 {
        return Ok(z.to_vec());
    }
    let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm <= tau {
        return Ok(vec![0.0; z.len()]);
    }
    let factor = 1.0 - tau / norm;
    Ok(z.iter().map(|v| factor * v).collect())
}

/// Prox of `tau1 |.|_1 + tau_g |.|_2`: soft-thresholding, then group
/// shrinkage.
pub fn sparse_group_prox(z: &[f64], tau1: f64, tau_g: f64) -> Result<Vec<f64>> {
    group_prox(&soft_threshold(z, tau1)?, tau_g)
}

/// How the per-step thresholds are derived from `gamma`, the lambdas and
/// the learning rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProxScaling {
    /// Proximal gradient: `tau1 = lr * gamma * lambda1`,
    /// `tau_g = lr * gamma * lambda_g * sqrt(d)`.
    #[default]
    Standard,
    /// Learning-rate free: `tau1 = gamma * lambda1`, `tau_g = gamma * lambda_g`.
    Literal,
}

impl ProxScaling {
    /// `(tau1, tau_g)` for a hook of width `dim`.
    pub fn thresholds(
        self,
        lr: f64,
        gamma: f64,
        lambda1: f64,
        lambda_g: f64,
        dim: usize,
    ) -> (f64, f64) {
        match self {
            ProxScaling::Standard => (
                lr * gamma * lambda1,
                lr * gamma * lambda_g * (dim as f64).sqrt(),
            ),
            ProxScaling::Literal => (gamma * lambda1, gamma * lambda_g),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    /// `lr0 * (1 + cos(pi * t / steps)) / 2`.
    #[default]
    Cosine,
    Constant,
}

impl LrSchedule {
    pub fn at(self, lr0: f64, step: usize, steps: usize) -> f64 {
        match self {
            LrSchedule::Cosine => {
                let frac = step as f64 / steps.max(1) as f64;
                lr0 * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
            }
            LrSchedule::Constant => lr0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Minimizer of `0.5 (x - z)^2 + tau |x|` found by scanning a dense grid
    /// for the sign change of the subgradient `x - z + tau sign(x)` and
    /// bisecting inside that cell.
    fn brute_scalar_prox(z: f64, tau: f64) -> f64 {
        let lo = -(z.abs() + tau + 1.0);
        let hi = z.abs() + tau + 1.0;
        // Subgradient interval at x.
        let sub = |x: f64| -> (f64, f64) {
            if x > 0.0 {
                (x - z + tau, x - z + tau)
            } else if x < 0.0 {
                (x - z - tau, x - z - tau)
            } else {
                (-z - tau, -z + tau)
            }
        };
        if sub(0.0).0 <= 0.0 && sub(0.0).1 >= 0.0 {
            return 0.0;
        }
        let cells = 10_000;
        let grid = |k: usize| lo + (hi - lo) * k as f64 / cells as f64;
        let k = (0..cells)
            .find(|&k| sub(grid(k + 1)).1 >= 0.0)
            .expect("sign change inside the box");
        let (mut a, mut b) = (grid(k), grid(k + 1));
        for _ in 0..200 {
            let m = 0.5 * (a + b);
            if sub(m).1 >= 0.0 {
                b = m;
            } else {
                a = m;
            }
        }
        0.5 * (a + b)
    }

    #[test]
    fn soft_threshold_examples() {
        assert_eq!(
            soft_threshold(&[0.5, -0.2, 0.0], 0.0).unwrap(),
            vec![0.5, -0.2, 0.0]
        );
        let out = soft_threshold(&[0.5, -0.2, 0.0], 0.3).unwrap();
        assert!((out[0] - 0.2).abs() < 1e-15);
        assert_eq!(&out[1..], &[0.0, 0.0]);
        assert!(matches!(soft_threshold(&[1.0], -0.1), Err(Error::Usage(_))));
    }

    #[test]
    fn group_prox_examples() {
        let out = group_prox(&[3.0, 4.0], 1.0).unwrap();
        assert!((out[0] - 2.4).abs() < 1e-15 && (out[1] - 3.2).abs() < 1e-15);
        assert_eq!(group_prox(&[0.3, 0.4], 0.5).unwrap(), vec![0.0, 0.0]);
        assert_eq!(group_prox(&[0.0, 0.0], 0.5).unwrap(), vec![0.0, 0.0]);
        assert_eq!(group_prox(&[3.0, -4.0], 0.0).unwrap(), vec![3.0, -4.0]);
        assert!(matches!(group_prox(&[1.0], -1.0), Err(Error::Usage(_))));
    }

    #[test]
    fn thresholds_by_scaling() {
        assert_eq!(
            ProxScaling::Standard.thresholds(0.5, 0.1, 1.0, 2.0, 4),
            (0.05, 0.2)
        );
        assert_eq!(
            ProxScaling::Literal.thresholds(0.5, 0.1, 1.0, 2.0, 4),
            (0.1, 0.2)
        );
    }

    #[test]
    fn cosine_schedule_shape() {
        let s = LrSchedule::Cosine;
        assert_eq!(s.at(0.1, 0, 1000), 0.1);
        assert!(s.at(0.1, 1000, 1000).abs() < 1e-17);
        let mut prev = f64::INFINITY;
        for t in 0..=1000 {
            let lr = s.at(0.1, t, 1000);
            assert!(lr <= prev);
            prev = lr;
        }
        assert_eq!(LrSchedule::Constant.at(0.1, 500, 1000), 0.1);
    }

    proptest! {
        #[test]
        fn soft_threshold_is_odd(z in prop::collection::vec(-5.0f64..5.0, 1..8), tau in 0.0f64..3.0) {
            let neg: Vec<f64> = z.iter().map(|v| -v).collect();
            let a = soft_threshold(&z, tau).unwrap();
            let b = soft_threshold(&neg, tau).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert_eq!(*x, -*y);
            }
        }

        #[test]
        fn soft_threshold_matches_grid_minimizer(z in -4.0f64..4.0, tau in 0.0f64..2.0) {
            let fast = soft_threshold(&[z], tau).unwrap()[0];
            prop_assert!((fast - brute_scalar_prox(z, tau)).abs() < 1e-8);
        }
    }
}
