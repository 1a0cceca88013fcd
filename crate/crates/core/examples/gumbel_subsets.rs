//! Demonstrates the Gumbel-softmax k-subset relaxation: how temperature
//! controls how close sampled masks are to hard top-k selections.
//!
//! Run with `cargo run --example gumbel_subsets`.

use bla::l2x::{gumbel_softmax_k_subset, topk_hard_mask, L2xConfig};
use bla::tensor::{Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let logits = vec![2.0, 1.5, 0.5, 0.0, -0.5, -1.0, -2.0, -3.0];
    let k = 3;
    for tau in [2.0, 0.5, 0.1] {
        let cfg = L2xConfig { k, tau };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut tape = Tape::new();
        let l = tape.leaf(Tensor::vector(logits.clone()));
        let mask = gumbel_softmax_k_subset(&mut tape, l, &cfg, &mut rng).unwrap();
        let soft = tape.value(mask).data().to_vec();
        println!(
            "tau {tau:>4}: relaxed mask {:?}",
            soft.iter().map(|v| format!("{v:.2}")).collect::<Vec<_>>()
        );
    }
    let hard = topk_hard_mask(&logits, k).unwrap();
    println!("hard top-{k}:  {:?}", hard.iter().map(|&b| u8::from(b)).collect::<Vec<_>>());
}
