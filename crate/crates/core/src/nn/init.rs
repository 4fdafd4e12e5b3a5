use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

use super::{DiffTensor, Real};

/// Uniform `[-√(1/fan_in), √(1/fan_in)]` weights.
///
/// The stream is ChaCha20 (a counter-mode generator) keyed by
/// SHA-256(seed ‖ name), so each parameter's values depend only on the run
/// seed and its own name.
pub fn seeded_init<T: Real>(shape: Vec<usize>, fan_in: usize, seed: u64, name: &str) -> DiffTensor<T> {
    assert!(fan_in >= 1, "fan_in must be at least 1");
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    let key: [u8; 32] = h.finalize().into();
    let mut rng = ChaCha20Rng::from_seed(key);
    let bound = (1.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let values = (0..n).map(|_| T::of(rng.gen_range(-bound..bound))).collect();
    DiffTensor {
        shape,
        values,
        grad: None,
        requires_grad: true,
    }
}
