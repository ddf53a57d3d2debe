//! Seeded initialisers. Each parameter draws from its own stream derived from
//! the model seed and the parameter name, so a parameter's initial value does
//! not depend on which other parameters a model variant happens to register.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::real::Real;
use crate::tensor::Tensor;

/// FNV-1a, used to mix parameter names into the seed.
pub fn name_hash(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn param_rng(seed: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ name_hash(name).rotate_left(17))
}

/// Kaiming-uniform with fan-in scaling for ReLU networks:
/// `U(-b, b)` with `b = sqrt(6 / fan_in)`.
pub fn kaiming_uniform<E: Real>(shape: &[usize], fan_in: usize, seed: u64, name: &str) -> Tensor<E> {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    let mut rng = param_rng(seed, name);
    Tensor::from_fn(shape, |_| E::from_f64_lossy(rng.gen_range(-bound..bound)))
}
