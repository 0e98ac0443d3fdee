//! Seeded inputs for the kernel benchmarks.

use bilex_core::numerics::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::matrix(rows, cols, data).expect("shape matches data")
}

/// Token ids in `0..vocab`.
pub fn random_ids(len: usize, vocab: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.random_range(0..vocab)).collect()
}

/// Copy of `ids` with roughly `rate` of the positions replaced.
pub fn corrupt(ids: &[usize], vocab: usize, rate: f64, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.iter()
        .map(|&t| if rng.random_bool(rate) { rng.random_range(0..vocab) } else { t })
        .collect()
}

/// Sentences of short pseudo-words over a small alphabet.
pub fn word_corpus(sentences: usize, len: usize, seed: u64) -> Vec<Vec<String>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..sentences)
        .map(|_| {
            (0..len)
                .map(|_| {
                    let n = rng.random_range(2..7);
                    (0..n).map(|_| char::from(b'a' + rng.random_range(0..6u8))).collect()
                })
                .collect()
        })
        .collect()
}
