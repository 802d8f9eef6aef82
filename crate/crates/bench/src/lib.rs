//! Inputs shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use eventformer::synthgen::{Generator, GeneratorConfig};
use eventformer::setmatch::CostMatrix;
use eventformer::SequenceSample;

/// Square cost matrix with entries in `[0, 1)`.
pub fn random_costs(n: usize, seed: u64) -> CostMatrix {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    CostMatrix::new(n, n, (0..n * n).map(|_| r.gen::<f64>()).collect()).expect("square")
}

/// `n` sequences from the default generator.
pub fn sequences(n: usize, seed: u64) -> Vec<SequenceSample> {
    let g = Generator::new(GeneratorConfig::default(), seed).expect("default generator is valid");
    (0..n as u64).map(|i| g.sequence(i, format!("b{i}"))).collect()
}
