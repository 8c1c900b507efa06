//! Inputs shared by the benchmarks.

use cerse_core::{StftConfig, Waveform};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn noise_waveform(secs: f64, seed: u64) -> Waveform {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = (secs * 16_000.0) as usize;
    Waveform::new((0..n).map(|_| rng.random_range(-0.5..0.5)).collect(), 16_000).expect("valid waveform")
}

/// Positive random magnitudes of shape `bins x frames`.
pub fn magnitudes(frames: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bins = StftConfig::default().bins();
    Array2::from_shape_simple_fn((bins, frames), || rng.random_range(0.01..2.0))
}

pub fn random_text(len: usize, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| (b'a' + rng.random_range(0..26u8)) as char).collect()
}
