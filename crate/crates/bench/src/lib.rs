//! Seeded fixtures shared by the benchmarks.

use feedloop_core::{Embedding, KbEntry, KnowledgeBase};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_embedding(rng: &mut ChaCha8Rng, dim: usize) -> Embedding {
    Embedding::new((0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("finite values")
}

/// In-memory store of `n` random entries.
pub fn random_store(n: usize, dim: usize, seed: u64) -> KnowledgeBase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut kb = KnowledgeBase::new();
    for i in 0..n {
        kb.append(KbEntry {
            id: format!("e{i}"),
            emb: random_embedding(&mut rng, dim),
            reasoning: String::new(),
            feedback: String::new(),
            meta: None,
        })
        .expect("unique ids, fixed dim");
    }
    kb
}

pub fn random_labels_and_scores(n: usize, seed: u64) -> (Vec<u8>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            (
                if i < 2 {
                    i as u8
                } else {
                    rng.random_range(0..2u8)
                },
                rng.random_range(0.0..=1.0),
            )
        })
        .unzip()
}
