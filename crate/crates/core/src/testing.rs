//! Helpers shared by unit tests, integration tests, and the `grad-check` verb.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{Tape, Tensor, Var};

pub fn random_tensor(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// `Σ x ⊙ W` for a fixed pseudo-random `W`: a scalar with a generic gradient
/// (plain sums vanish through a trailing layer norm).
pub fn projection_loss(tape: &mut Tape, x: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random_tensor(&mut rng, tape.shape(x), 1.0);
    let w = tape.constant(w);
    let p = tape.mul(x, w)?;
    tape.sum(p)
}
