//! Fixtures shared by the benchmarks.

use histgen::cmc::CmcConfig;
use histgen::decoder::DecoderConfig;
use histgen::lgh::EncoderConfig;
use histgen::model::{Arm, ModelConfig};
use histgen::nn::Mat;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn features(n: usize, d: usize, seed: u64) -> Mat {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Mat::from_shape_simple_fn((n, d), || rng.random_range(-1.0..1.0))
}

/// A mid-sized model: `d_model` 64, 4 heads, 2 decoder layers.
pub fn model_config(region_size: usize, vocab: usize) -> ModelConfig {
    ModelConfig {
        arm: Arm::CmcLgh,
        encoder: EncoderConfig {
            region_size,
            d_model: 64,
            d_in: 128,
            local_layers: 1,
            global_layers: 1,
            heads: 4,
            ff_dim: 128,
            use_positional_encoding: true,
            dropout: 0.0,
        },
        cmc: CmcConfig {
            memory_slots: 128,
            prototypes: 16,
            heads: 4,
        },
        decoder: DecoderConfig {
            layers: 2,
            heads: 4,
            d_model: 64,
            ff_dim: 128,
            vocab_size: vocab,
            max_len: 30,
            beam_size: 3,
            dropout: 0.0,
        },
    }
}

/// Word sequences over a small vocabulary, as `(candidate, reference)`.
pub fn text_pairs(count: usize, len: usize, seed: u64) -> Vec<(Vec<u32>, Vec<u32>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sentence = |rng: &mut ChaCha8Rng| (0..len).map(|_| rng.random_range(0..40)).collect::<Vec<u32>>();
    (0..count).map(|_| (sentence(&mut rng), sentence(&mut rng))).collect()
}
