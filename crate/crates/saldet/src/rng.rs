//! Seeded randomness. Every stochastic choice in the crate flows through a
//! ChaCha8 stream so identical seeds replay identical runs on any platform.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type SeededRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Seed of the independent stream for a named component; hashing the
/// tag keeps, for example, data generation and weight init from ever
/// sharing draws.
pub fn substream_seed(seed: u64, tag: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in tag.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    seed ^ h
}

/// Derives an independent stream for a named component.
pub fn substream(seed: u64, tag: &str) -> SeededRng {
    seeded(substream_seed(seed, tag))
}

/// Standard normal draw via Box-Muller; two uniforms per call keeps the
/// stream layout independent of any library's caching strategy.
pub fn gaussian(rng: &mut SeededRng) -> f64 {
    loop {
        let u1: f64 = rng.random();
        let u2: f64 = rng.random();
        if u1 > 0.0 {
            return (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
        }
    }
}

/// Uniform draw in [lo, hi).
pub fn uniform(rng: &mut SeededRng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

/// Tensor of independent zero-mean Gaussians with the given standard
/// deviation.
pub fn gaussian_tensor(dims: &[usize], std: f64, rng: &mut SeededRng) -> crate::tensor::Tensor {
    let n: usize = dims.iter().product();
    let vals: Vec<f64> = (0..n).map(|_| std * gaussian(rng)).collect();
    crate::tensor::Tensor::from_vec(dims.to_vec(), vals).expect("dims match")
}
