//! Seeded randomness. Every random draw in the crate flows through a
//! ChaCha8 stream so runs are reproducible bit for bit across platforms.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

pub type Prng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Prng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Mix a label into a seed (FNV-1a) for independent named substreams.
pub fn derive(seed: u64, label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in label.as_bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100_0000_01b3);
    }
    seed ^ h
}

/// Derive an independent stream for a named subsystem of a run.
pub fn substream(seed: u64, label: &str) -> Prng {
    seeded(derive(seed, label))
}

/// Uniform in [-half_width, half_width).
pub fn uniform_tensor(rng: &mut Prng, shape: Vec<usize>, half_width: f32) -> Tensor {
    let numel: usize = shape.iter().product();
    let data = (0..numel)
        .map(|_| rng.gen_range(-half_width..half_width))
        .collect();
    Tensor::new(shape, data).expect("shape/data length agree by construction")
}

/// Box-Muller normals; rand's Standard distribution on f32 pairs.
pub fn normal_tensor(rng: &mut Prng, shape: Vec<usize>, std: f32) -> Tensor {
    let numel: usize = shape.iter().product();
    let mut data = Vec::with_capacity(numel);
    while data.len() < numel {
        let u1: f32 = rng.gen_range(f32::EPSILON..1.0);
        let u2: f32 = rng.gen_range(0.0..1.0);
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f32::consts::PI * u2;
        data.push(r * theta.cos() * std);
        if data.len() < numel {
            data.push(r * theta.sin() * std);
        }
    }
    Tensor::new(shape, data).expect("shape/data length agree by construction")
}
