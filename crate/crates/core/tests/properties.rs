//! Property tests for the library's core invariants.

use bla::bla::discretize;
use bla::l2x::topk_hard_mask;
use bla::saliency::spearman;
use bla::stats::{mann_whitney_u, mean_stderr, wilcoxon_signed_rank};
use bla::tensor::{grad_check, scaled_softmax_value, Tape, Tensor};
use proptest::prelude::*;

/// Finite values bounded away from the kinks of beta/relu/max.
fn away_from_kinks(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(
        (0.05f64..3.0).prop_flat_map(|m| prop_oneof![Just(m), Just(-m)]),
        n,
    )
}

proptest! {
    #[test]
    // theta * spread is kept below ~700 so exp never underflows to an
    // exact zero; within that regime every probability is strictly positive.
    fn softmax_is_a_distribution(xs in prop::collection::vec(-50.0f64..50.0, 1..64),
                                 theta in 0.01f64..6.0) {
        let q = scaled_softmax_value(&xs, theta);
        let sum: f64 = q.iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-12);
        prop_assert!(q.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn beta_is_nonpositive_and_identity_below_zero(xs in prop::collection::vec(-10.0f64..10.0, 1..32)) {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(xs.clone()));
        let b = tape.beta(x);
        for (orig, out) in xs.iter().zip(tape.value(b).data()) {
            prop_assert!(*out <= 0.0);
            if *orig <= 0.0 {
                prop_assert_eq!(*out, *orig);
            } else {
                // The literal constant zero, so exact comparison downstream
                // is safe.
                prop_assert_eq!(out.to_bits(), 0.0f64.to_bits());
            }
        }
    }

    #[test]
    fn discretize_never_empty_and_marks_zeros(xs in prop::collection::vec(-5.0f64..0.0, 1..64),
                                              zeros in prop::collection::vec(any::<bool>(), 1..64)) {
        let l: Vec<f64> = xs.iter().zip(&zeros).map(|(&x, &z)| if z { 0.0 } else { x.min(-1e-9) }).collect();
        let delta = discretize(&l);
        prop_assert!(delta.iter().any(|&d| d));
        if l.iter().any(|&x| x == 0.0) {
            for (li, di) in l.iter().zip(&delta) {
                prop_assert_eq!(*di, *li == 0.0);
            }
        }
    }

    #[test]
    fn composite_grad_check_passes(xs in away_from_kinks(6), theta in 0.05f64..2.0) {
        let x = Tensor::vector(xs);
        let err = grad_check(
            move |tape, x| {
                let r = tape.relu(x);
                let b = tape.beta(x);
                let s = tape.add(r, b).unwrap();
                let q = tape.scaled_softmax(s, theta).unwrap();
                let z = tape.mul(q, q).unwrap();
                let m = tape.mean(z);
                tape.bce_with_logits(m, 1.0).unwrap()
            },
            &x,
            1e-5,
        );
        prop_assert!(err < 1e-4, "err {err}");
    }

    #[test]
    fn topk_mask_has_exactly_k_ones(probs in prop::collection::vec(0.0f64..1.0, 2..32),
                                    kraw in any::<usize>()) {
        let k = kraw % probs.len() + 1;
        let mask = topk_hard_mask(&probs, k).unwrap();
        prop_assert_eq!(mask.iter().filter(|&&m| m).count(), k);
        // Every selected entry is >= every unselected entry.
        let min_sel = probs.iter().zip(&mask).filter(|(_, &m)| m).map(|(&p, _)| p).fold(f64::INFINITY, f64::min);
        let max_unsel = probs.iter().zip(&mask).filter(|(_, &m)| !m).map(|(&p, _)| p).fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(mask.iter().all(|&m| m) || min_sel >= max_unsel);
    }

    #[test]
    fn spearman_stays_in_range(a in prop::collection::vec(-10.0f64..10.0, 2..32),
                               b in prop::collection::vec(-10.0f64..10.0, 2..32)) {
        let n = a.len().min(b.len());
        let rho = spearman(&a[..n], &b[..n]).unwrap();
        prop_assert!((-1.0..=1.0).contains(&rho));
    }

    #[test]
    fn test_pvalues_stay_in_unit_interval(a in prop::collection::vec(-5.0f64..5.0, 2..12),
                                          b in prop::collection::vec(-5.0f64..5.0, 2..12)) {
        let (_, p) = mann_whitney_u(&a, &b).unwrap();
        prop_assert!((0.0..=1.0).contains(&p));
        let n = a.len().min(b.len());
        let (_, p) = wilcoxon_signed_rank(&a[..n], &b[..n]).unwrap();
        prop_assert!((0.0..=1.0).contains(&p));
    }

    #[test]
    fn mean_stderr_is_translation_equivariant(xs in prop::collection::vec(-100.0f64..100.0, 2..16),
                                              shift in -100.0f64..100.0) {
        let (m, se) = mean_stderr(&xs).unwrap();
        let shifted: Vec<f64> = xs.iter().map(|x| x + shift).collect();
        let (m2, se2) = mean_stderr(&shifted).unwrap();
        prop_assert!((m2 - (m + shift)).abs() < 1e-9);
        prop_assert!((se2 - se).abs() < 1e-9);
    }

    #[test]
    fn tape_replay_is_bit_identical(xs in away_from_kinks(8)) {
        let run = |xs: &[f64]| {
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::vector(xs.to_vec()));
            let r = tape.relu(x);
            let q = tape.scaled_softmax(r, 0.5).unwrap();
            let s = tape.sum(q);
            let e = tape.exp(s);
            let grads = tape.backward(e).unwrap();
            (tape.value(e).item(), grads.wrt(x).to_vec())
        };
        let (v1, g1) = run(&xs);
        let (v2, g2) = run(&xs);
        prop_assert_eq!(v1.to_bits(), v2.to_bits());
        for (a, b) in g1.iter().zip(&g2) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
