//! Seeded synthetic pools for tests, benchmarks and demos.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::types::{EmbeddingMatrix, TokenStats, TokenStatsSequence};

/// `n × d` matrix of independent standard normals.
pub fn gaussian_pool(n: usize, d: usize, seed: u64) -> EmbeddingMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..n * d).map(|_| StandardNormal.sample(&mut rng)).collect();
    EmbeddingMatrix::new(n, d, data).expect("finite normals")
}

/// Gaussian blobs: `clusters` centers drawn with per-coordinate standard
/// deviation `separation`, points scattered around them with deviation
/// `spread`. Points are assigned to clusters round-robin.
pub fn clustered_pool(n: usize, d: usize, clusters: usize, spread: f64, separation: f64, seed: u64) -> EmbeddingMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<Vec<f64>> = (0..clusters)
        .map(|_| (0..d).map(|_| { let z: f64 = StandardNormal.sample(&mut rng); separation * z }).collect())
        .collect();
    let mut data = Vec::with_capacity(n * d);
    for i in 0..n {
        let c = &centers[i % clusters];
        for x in c {
            let z: f64 = StandardNormal.sample(&mut rng);
            data.push(x + spread * z);
        }
    }
    EmbeddingMatrix::new(n, d, data).expect("finite blobs")
}

/// Valid greedy-decoding statistics with lengths in `1..=max_len` over a
/// vocabulary of `vocab` tokens.
pub fn random_token_stats(n: usize, max_len: usize, vocab: usize, seed: u64) -> Vec<TokenStatsSequence> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let max_entropy = (vocab.max(2) as f64).ln();
    (0..n)
        .map(|_| {
            let len = rng.random_range(1..=max_len.max(1));
            let steps = (0..len)
                .map(|_| {
                    let top1: f64 = rng.random_range(1.0 / vocab.max(2) as f64..=1.0);
                    let top2 = rng.random_range(0.0..=top1.min(1.0 - top1));
                    let entropy = rng.random_range(0.0..=max_entropy);
                    TokenStats::greedy(entropy, top1, top2)
                })
                .collect();
            TokenStatsSequence::new(steps).expect("generated steps are valid")
        })
        .collect()
}
