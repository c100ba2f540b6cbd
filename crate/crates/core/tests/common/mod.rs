#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vapp_core::model::{ModelConfig, PromptVap};
use vapp_numcore::{Real, Tensor};

pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        d_model: 16,
        heads: 2,
        channel_layers: 1,
        cross_layers: 2,
        ffn_mult: 2,
        embed_dim: 8,
        window_s: 0.4,
        dropout: 0.0,
        ..ModelConfig::default()
    }
}

pub fn random_vec<F: Real>(n: usize, seed: u64) -> Vec<F> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| F::from_f64(rng.random_range(-1.0..1.0)))
        .collect()
}

pub fn unit_vec<F: Real>(n: usize, seed: u64) -> Vec<F> {
    let v: Vec<f64> = random_vec(n, seed);
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| F::from_f64(x / norm)).collect()
}

pub fn random_features<F: Real>(t: usize, dim: usize, seed: u64) -> Tensor<F> {
    Tensor::new(&[t, dim], random_vec(t * dim, seed)).unwrap()
}

/// Initialized model with every tensor (including the zero-initialized VAP
/// head) replaced by small random values.
pub fn random_model<F: Real>(cfg: ModelConfig, seed: u64) -> PromptVap<F> {
    let mut model = PromptVap::<F>::init(cfg, seed).unwrap();
    for (i, t) in model.params_mut().values_mut().enumerate() {
        let fresh: Vec<F> = random_vec(t.len(), seed * 1000 + i as u64);
        for (x, r) in t.data_mut().iter_mut().zip(fresh) {
            *x = r * F::from_f64(0.5);
        }
    }
    model
}

pub fn noise_audio(n: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(-0.3..0.3)).collect()
}
