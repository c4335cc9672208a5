use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::Tensor;

/// Standard deviation of the Gaussian used for the initial tokens.
pub const BOTTLENECK_INIT_STD: f64 = 0.02;

/// `K × d` bottleneck tokens. `K = 0` disables the bottleneck and the
/// modalities attend to each other directly.
#[derive(Clone, Debug, PartialEq)]
pub struct BottleneckState {
    pub tokens: Tensor,
}

impl BottleneckState {
    pub fn k(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn d(&self) -> usize {
        self.tokens.shape()[1]
    }

    pub fn is_disabled(&self) -> bool {
        self.k() == 0
    }
}

/// Draws `K × d` tokens from `N(0, 0.02²)` with a seeded generator.
pub fn init_bottleneck(k: usize, d: usize, seed: u64) -> BottleneckState {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, BOTTLENECK_INIT_STD).expect("valid std");
    let data = (0..k * d).map(|_| normal.sample(&mut rng)).collect();
    BottleneckState {
        tokens: Tensor::new(vec![k, d], data).expect("shape matches data"),
    }
}
