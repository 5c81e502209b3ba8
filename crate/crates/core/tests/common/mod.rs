#![allow(dead_code)]

use adapter_core::model::{Frontend, ModelConfig, Positional};
use adapter_core::numerics::Tensor;
use adapter_core::synthdata::SynthSpec;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// The one-layer ledger config: d_model 4, one head, d_ffn 8, vocab 3.
pub fn toy_config() -> ModelConfig {
    ModelConfig {
        num_layers: 1,
        d_model: 4,
        num_heads: 1,
        d_ffn: 8,
        vocab_size: 3,
        d_in: 4,
        frontend: Frontend::Identity,
        max_seq_len: 32,
        positional: Positional::Sinusoidal,
    }
}

pub fn small_config(num_layers: usize) -> ModelConfig {
    ModelConfig {
        num_layers,
        d_model: 8,
        num_heads: 2,
        d_ffn: 16,
        vocab_size: 4,
        d_in: 8,
        frontend: Frontend::Identity,
        max_seq_len: 64,
        positional: Positional::Sinusoidal,
    }
}

pub fn small_spec(num_utterances: usize, seed: u64) -> SynthSpec {
    SynthSpec {
        vocab_size: 4,
        d_in: 8,
        frames_per_token: [2, 3],
        noise_sigma: 0.05,
        utterance_len: [2, 4],
        num_utterances,
        seed,
        language_tag: "A".into(),
        prototype_seed: None,
    }
}
