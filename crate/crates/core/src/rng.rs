//! Random sources for stochastic layers and parameter initialization.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::tensor::Blob;

/// Stream of uniform draws in `[0, 1)`.
///
/// Stochastic layers draw through this trait so a recorded tape can replace
/// the generator when a computation must be reproduced exactly.
pub trait UniformSource: Send {
    fn next_uniform(&mut self) -> f64;
}

/// Seeded generator owned by one execution unit.
pub struct UnitRng(ChaCha8Rng);

impl UnitRng {
    pub fn new(seed: u64) -> Self {
        UnitRng(ChaCha8Rng::seed_from_u64(seed))
    }

    /// Generator for a named stream derived from a job seed.
    pub fn derived(seed: u64, stream: &str) -> Self {
        UnitRng::new(derive_seed(seed, stream))
    }
}

impl UniformSource for UnitRng {
    fn next_uniform(&mut self) -> f64 {
        self.0.random::<f64>()
    }
}

impl RngCore for UnitRng {
    fn next_u32(&mut self) -> u32 {
        self.0.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.0.fill_bytes(dst)
    }
}

/// Pre-recorded uniform draws, consumed in order. Panics when exhausted.
#[derive(Debug, Clone)]
pub struct Tape {
    values: Vec<f64>,
    pos: usize,
}

impl Tape {
    pub fn new(values: Vec<f64>) -> Self {
        Tape { values, pos: 0 }
    }

    pub fn consumed(&self) -> usize {
        self.pos
    }
}

impl UniformSource for Tape {
    fn next_uniform(&mut self) -> f64 {
        let v = *self
            .values
            .get(self.pos)
            .unwrap_or_else(|| panic!("random tape exhausted after {} draws", self.pos));
        self.pos += 1;
        v
    }
}

/// Stable 64-bit seed for `(seed, name)`, independent of platform and process.
pub fn derive_seed(seed: u64, name: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
}

/// Uniform `[-r, r]` with `r = sqrt(6 / (fan_in + fan_out))`, seeded by the
/// parameter name so the values do not depend on partitioning.
pub fn xavier_uniform(seed: u64, name: &str, rows: usize, cols: usize) -> Blob {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let mut rng = UnitRng::derived(seed, name);
    let data = (0..rows * cols)
        .map(|_| (2.0 * rng.next_uniform() - 1.0) * limit)
        .collect();
    Blob::from_vec(rows, cols, data).expect("length matches shape")
}

/// Bernoulli samples of `probs`, one draw per entry in row-major order.
pub fn bernoulli(probs: &Blob, rng: &mut dyn UniformSource) -> Blob {
    probs.map(|p| if rng.next_uniform() < p { 1.0 } else { 0.0 })
}
