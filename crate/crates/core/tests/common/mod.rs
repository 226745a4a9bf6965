#![allow(dead_code)]

use ctxdet::data::{generate_synthetic, CodeSample, GrammarConfig};
use ctxdet::model::{Model, ModelConfig};
use ctxdet::numerics::Rng;
use ctxdet::training::{LossConfig, TrainConfig, Trainer};

/// Smallest architecture that still exercises every component.
pub fn micro_config() -> ModelConfig {
    ModelConfig {
        d: 8,
        d1: 16,
        d2: 16,
        bins: 4,
        queries: 4,
        encoder_layers: 1,
        encoder_heads: 2,
        encoder_ffn: 16,
        lm_layers: 1,
        lm_heads: 2,
        lm_ffn: 16,
        decoder_layers: 1,
        decoder_heads: 2,
        decoder_ffn: 16,
        ..ModelConfig::default()
    }
}

pub fn micro_model(seed: u64) -> Model {
    let vocab = GrammarConfig::default().vocabulary().unwrap();
    Model::new(micro_config(), vocab, &mut Rng::new(seed)).unwrap()
}

pub fn corpus(seed: u64, n: usize) -> Vec<CodeSample> {
    generate_synthetic(&mut Rng::new(seed), n, &GrammarConfig::default()).unwrap()
}

pub fn micro_trainer(seed: u64, steps: u64) -> Trainer {
    let train = TrainConfig {
        steps,
        batch: 2,
        warmup: 3,
        seed,
        ..TrainConfig::default()
    };
    Trainer::new(micro_model(seed), train, LossConfig::default()).unwrap()
}
