//! Shared fixtures for the benchmarks.

use semcolor_core::data::{make_synthetic_corpus, prepare_all, Prepared, SyntheticSpec};
use semcolor_core::{ModelConfig, Tensor};

/// Deterministic pseudo-random values in [-1, 1).
pub fn wave(len: usize, salt: u64) -> Vec<f32> {
    let mut s = salt.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1;
    (0..len)
        .map(|_| {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            (s >> 40) as f32 / (1u64 << 23) as f32 - 1.0
        })
        .collect()
}

pub fn tensor(shape: &[usize], salt: u64) -> Tensor<f32> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, wave(n, salt)).expect("shape matches")
}

/// The small synthetic corpus the desk model trains on.
pub fn desk_corpus(count: usize) -> (ModelConfig, Vec<Prepared>) {
    let cfg = ModelConfig::desk(4);
    let samples = make_synthetic_corpus(&SyntheticSpec::new(count, 32, 4, 0)).expect("corpus");
    let data = prepare_all(&samples, &cfg).expect("prepare");
    (cfg, data)
}
