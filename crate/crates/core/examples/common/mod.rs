//! Shared setup for the examples: a small synthetic corpus and a quickly
//! trained model.

#![allow(dead_code)]

use haqae::checkpoint::Checkpoint;
use haqae::config::{HaqaeConfig, Variant};
use haqae::corpus::{
    build_vocabulary, default_grammar, generate_synthetic_corpus, EventSequence, Vocabulary,
};
use haqae::model::build_variant;
use haqae::train::train;

pub struct Data {
    pub train: Vec<EventSequence>,
    pub valid: Vec<EventSequence>,
    pub vocab: Vocabulary,
}

impl Data {
    pub fn ids(&self, seqs: &[EventSequence]) -> Vec<Vec<u32>> {
        seqs.iter()
            .map(|s| self.vocab.encode_words(s).expect("in-vocabulary corpus"))
            .collect()
    }
}

pub fn synthetic(n: usize) -> Data {
    let all: Vec<EventSequence> = generate_synthetic_corpus(&default_grammar(), n, 11)
        .expect("built-in grammar is valid")
        .into_iter()
        .map(|l| l.sequence)
        .collect();
    let cut = n * 9 / 10;
    let vocab = build_vocabulary(&all[..cut], 5_000).expect("non-empty corpus");
    Data {
        valid: all[cut..].to_vec(),
        train: all[..cut].to_vec(),
        vocab,
    }
}

pub fn small_config(variant: Variant, steps: u64) -> HaqaeConfig {
    HaqaeConfig {
        latents: 3,
        codes: 8,
        latent_dim: 24,
        enc_hidden: 24,
        dec_hidden: 48,
        word_dim: 24,
        role_dim: 8,
        batch_size: 16,
        max_steps: Some(steps),
        eval_interval: steps,
        lr: 0.003,
        ..HaqaeConfig::desk(variant)
    }
}

/// Trains a fresh model and returns the checkpoint with the best
/// validation NLL.
pub fn trained(data: &Data, config: &HaqaeConfig) -> Checkpoint<f32> {
    let model = build_variant(config, data.vocab.len()).expect("valid config");
    let start = Checkpoint::new(model, data.vocab.clone());
    let outcome = train(start, &data.ids(&data.train), &data.ids(&data.valid), |r| {
        println!("  {r}")
    })
    .expect("training runs");
    outcome.best
}
