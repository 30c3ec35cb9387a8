// SPDX-License-Identifier: MIT OR Apache-2.0

//! Comparing a learned stack with a task's planted map.

use serde::{Deserialize, Serialize};
use steer_core::{AffineMap, TransportStack};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryScore {
    pub planted_support: usize,
    pub learned_support: usize,
    /// Coordinates active in both.
    pub hits: usize,
    /// `hits / planted_support`; `None` when nothing was planted.
    pub recall: Option<f64>,
    /// `hits / learned_support`; `None` when nothing was learned.
    pub precision: Option<f64>,
    /// Share of the learned support sitting at hooks that carry a planted
    /// coordinate.
    pub planted_hook_fraction: Option<f64>,
}

fn active(map: &AffineMap) -> Vec<bool> {
    map.omega()
        .iter()
        .zip(map.bias())
        .map(|(w, b)| *w != 1.0 || *b != 0.0)
        .collect()
}

/// Both stacks must have the same hook widths.
pub fn recovery_score(learned: &TransportStack, planted: &TransportStack) -> RecoveryScore {
    assert_eq!(
        learned.hook_dims(),
        planted.hook_dims(),
        "stacks for different models"
    );
    let (mut p, mut l, mut hits, mut at_planted_hooks) = (0, 0, 0, 0);
    for (lm, pm) in learned.maps().iter().zip(planted.maps()) {
        let (la, pa) = (active(lm), active(pm));
        let hook_planted = pa.iter().any(|&x| x);
        for (a, b) in la.iter().zip(&pa) {
            p += *b as usize;
            l += *a as usize;
            hits += (*a && *b) as usize;
            if *a && hook_planted {
                at_planted_hooks += 1;
            }
        }
    }
    let ratio = |a: usize, b: usize| (b > 0).then(|| a as f64 / b as f64);
    RecoveryScore {
        planted_support: p,
        learned_support: l,
        hits,
        recall: ratio(hits, p),
        precision: ratio(hits, l),
        planted_hook_fraction: ratio(at_planted_hooks, l),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_overlap() {
        let planted = TransportStack::new(vec![
            AffineMap::identity(2),
            AffineMap::new(vec![2.0, 1.0, 1.0], vec![0.0, 0.0, 1.0]).unwrap(),
        ]);
        let learned = TransportStack::new(vec![
            AffineMap::new(vec![1.0, 1.0], vec![0.5, 0.0]).unwrap(),
            AffineMap::new(vec![1.5, 1.1, 1.0], vec![0.0, 0.0, 0.0]).unwrap(),
        ]);
        let s = recovery_score(&learned, &planted);
        assert_eq!((s.planted_support, s.learned_support, s.hits), (2, 3, 1));
        assert_eq!(s.recall, Some(0.5));
        assert_eq!(s.planted_hook_fraction, Some(2.0 / 3.0));
        let none = recovery_score(&TransportStack::identity(&[2, 3]), &planted);
        assert_eq!(none.precision, None);
        assert_eq!(none.recall, Some(0.0));
    }
}
