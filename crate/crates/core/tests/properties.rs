// SPDX-License-Identifier: MIT OR Apache-2.0

use proptest::prelude::*;
use steer_core::model::HookIntervention;
use steer_core::transport::Chained;
use steer_core::{group_prox, sliced_w2, soft_threshold, AffineMap, Tensor, TransportStack};

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-5.0f64..5.0, rows * cols)
        .prop_map(move |v| Tensor::from_vec(rows, cols, v).unwrap())
}

fn affine(d: usize) -> impl Strategy<Value = AffineMap> {
    (
        prop::collection::vec(-2.0f64..2.0, d),
        prop::collection::vec(-2.0f64..2.0, d),
    )
        .prop_map(|(w, b)| AffineMap::new(w, b).unwrap())
}

fn stack(dims: Vec<usize>) -> impl Strategy<Value = TransportStack> {
    dims.into_iter()
        .map(affine)
        .collect::<Vec<_>>()
        .prop_map(TransportStack::new)
}

fn reversed_rows(t: &Tensor) -> Tensor {
    let idx: Vec<usize> = (0..t.rows()).rev().collect();
    t.select_rows(&idx)
}

proptest! {
    #[test]
    fn sliced_w2_is_a_symmetric_nonnegative_row_order_free_cost(u in matrix(6, 3), v in matrix(6, 3)) {
        let uv = sliced_w2(&u, &v).unwrap();
        prop_assert!(uv >= 0.0);
        prop_assert!((uv - sliced_w2(&v, &u).unwrap()).abs() <= 1e-12 * uv.max(1.0));
        prop_assert_eq!(uv, sliced_w2(&reversed_rows(&u), &v).unwrap());
        prop_assert_eq!(sliced_w2(&u, &reversed_rows(&u)).unwrap(), 0.0);
    }

    #[test]
    fn shifting_one_side_costs_the_squared_shift(u in matrix(5, 2), c in -3.0f64..3.0) {
        let shifted = Tensor::from_vec(5, 2, u.data().iter().map(|x| x + c).collect()).unwrap();
        let cost = sliced_w2(&u, &shifted).unwrap();
        prop_assert!((cost - 2.0 * c * c).abs() < 1e-10);
    }

    #[test]
    fn composition_equals_chained_application(
        a in stack(vec![3, 2]), b in stack(vec![3, 2]), z0 in matrix(4, 3), z1 in matrix(4, 2)
    ) {
        let composed = TransportStack::compose(&a, &b).unwrap();
        let chain = Chained::new(vec![&a, &b]).unwrap();
        for (hook, z) in [(0, &z0), (1, &z1)] {
            let x = composed.intervene(hook, z).unwrap();
            let y = chain.intervene(hook, z).unwrap();
            prop_assert!(x.max_abs_diff(&y) < 1e-12);
        }
    }

    #[test]
    fn identity_is_neutral_for_composition(a in stack(vec![3, 2])) {
        let id = TransportStack::identity(&[3, 2]);
        prop_assert_eq!(&TransportStack::compose(&a, &id).unwrap(), &a);
        prop_assert_eq!(&TransportStack::compose(&id, &a).unwrap(), &a);
    }

    #[test]
    fn composition_is_associative(a in stack(vec![2]), b in stack(vec![2]), c in stack(vec![2])) {
        let left = TransportStack::compose(&TransportStack::compose(&a, &b).unwrap(), &c).unwrap();
        let right = TransportStack::compose(&a, &TransportStack::compose(&b, &c).unwrap()).unwrap();
        for (x, y) in left.map(0).omega().iter().chain(left.map(0).bias()).zip(right.map(0).omega().iter().chain(right.map(0).bias())) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn strength_is_affine_in_lambda(m in affine(3), z in matrix(4, 3), lambda in 0.0f64..1.0) {
        let t = m.apply(&z).unwrap();
        let blended = m.apply_with_strength(&z, lambda).unwrap();
        for ((b, x), y) in blended.data().iter().zip(z.data()).zip(t.data()) {
            let want = x + lambda * (y - x);
            prop_assert!((b - want).abs() <= 4.0 * f64::EPSILON * (x.abs() + y.abs()).max(1.0));
        }
        prop_assert!(m.apply_with_strength(&z, 0.0).unwrap().bit_eq(&z));
        prop_assert!(m.apply_with_strength(&z, 1.0).unwrap().bit_eq(&t));
    }

    #[test]
    fn soft_threshold_is_odd_and_shrinks(z in prop::collection::vec(-10.0f64..10.0, 1..8), tau in 0.0f64..5.0) {
        let pos = soft_threshold(&z, tau).unwrap();
        let neg_z: Vec<f64> = z.iter().map(|x| -x).collect();
        let neg = soft_threshold(&neg_z, tau).unwrap();
        for ((p, n), x) in pos.iter().zip(&neg).zip(&z) {
            prop_assert_eq!(*p, -n);
            prop_assert!(p.abs() <= x.abs());
            if x.abs() <= tau {
                prop_assert_eq!(*p, 0.0);
            }
        }
    }

    #[test]
    fn group_prox_keeps_direction(z in prop::collection::vec(-10.0f64..10.0, 1..8), tau in 0.0f64..5.0) {
        let out = group_prox(&z, tau).unwrap();
        let norm = z.iter().map(|x| x * x).sum::<f64>().sqrt();
        let out_norm = out.iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assert!((out_norm - (norm - tau).max(0.0)).abs() < 1e-10);
        if norm <= tau {
            prop_assert!(out.iter().all(|x| *x == 0.0));
        }
    }

    #[test]
    fn support_counts_changed_coordinates(
        flags in prop::collection::vec((any::<bool>(), any::<bool>()), 1..10)
    ) {
        let omega: Vec<f64> = flags.iter().map(|(w, _)| if *w { 1.5 } else { 1.0 }).collect();
        let bias: Vec<f64> = flags.iter().map(|(_, b)| if *b { -0.5 } else { 0.0 }).collect();
        let s = TransportStack::new(vec![AffineMap::new(omega, bias).unwrap()]).support(0.0);
        prop_assert_eq!(s.total, flags.iter().filter(|(w, b)| *w || *b).count());
        prop_assert_eq!(s.literal_sum, flags.iter().map(|(w, b)| *w as usize + *b as usize).sum::<usize>());
    }
}

#[test]
fn composition_depends_on_order() {
    let a = TransportStack::new(vec![AffineMap::new(vec![2.0], vec![0.0]).unwrap()]);
    let b = TransportStack::new(vec![AffineMap::new(vec![1.0], vec![1.0]).unwrap()]);
    let ab = TransportStack::compose(&a, &b).unwrap();
    let ba = TransportStack::compose(&b, &a).unwrap();
    // x -> 2x -> 2x + 1, and x -> x + 1 -> 2x + 2.
    assert_eq!(ab.map(0).bias(), &[1.0]);
    assert_eq!(ba.map(0).bias(), &[2.0]);
}
