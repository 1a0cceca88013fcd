//! Finite-difference verification of the reverse-mode autodiff engine on a
//! composite expression. Run with `cargo run --example gradcheck`.

use bla::tensor::{grad_check, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for trial in 0..5 {
        // Inputs bounded away from the relu/beta kink at zero.
        let x = Tensor::vector(
            (0..8)
                .map(|_| {
                    let m = rng.gen_range(0.1..2.0f64);
                    if rng.gen::<bool>() {
                        m
                    } else {
                        -m
                    }
                })
                .collect(),
        );
        let err = grad_check(
            |tape, x| {
                let r = tape.relu(x);
                let b = tape.beta(x);
                let s = tape.add(r, b).unwrap();
                let q = tape.scaled_softmax(s, 0.1).unwrap();
                let z = tape.mul(q, q).unwrap();
                let m = tape.mean(z);
                tape.bce_with_logits(m, 1.0).unwrap()
            },
            &x,
            1e-5,
        );
        println!("trial {trial}: max relative gradient error {err:.3e}");
    }
}
