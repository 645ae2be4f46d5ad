//! Seeded inputs shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tdir_core::Tensor;

pub fn random_tensor(dims: Vec<usize>, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = dims.iter().product();
    Tensor::new(dims, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("positive dims")
}

/// `count` samples of `windows` windows, each `components × window_len`,
/// labels alternating.
pub fn random_samples(count: usize, windows: usize, components: usize, window_len: usize) -> Vec<(Vec<Tensor>, usize)> {
    (0..count)
        .map(|i| {
            let w = (0..windows)
                .map(|t| random_tensor(vec![components, window_len], (i * windows + t) as u64))
                .collect();
            (w, i % 2)
        })
        .collect()
}
