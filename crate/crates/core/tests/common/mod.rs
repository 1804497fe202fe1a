#![allow(dead_code)]

use moelab::data::{encode, gen_mixture, EncodeLimits, EncodedExample, SyntheticConfig, Task};
use moelab::distill::{DistillConfig, Method};
use moelab::model::{LanguageModel, ModelConfig, MoeConfig};
use moelab::rng::{stream, Stream};

pub const SEQ: usize = 24;

pub fn teacher(seed: u64) -> LanguageModel {
    let cfg = ModelConfig {
        vocab_size: moelab::data::VOCAB_SIZE,
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        d_ff: 8,
        max_seq_len: SEQ,
        moe: Some(MoeConfig {
            n_experts: 4,
            k: 2,
            layers: vec![0, 1],
        }),
    };
    LanguageModel::new(cfg, &mut stream(seed, Stream::Init)).unwrap()
}

pub fn student(seed: u64) -> LanguageModel {
    let cfg = ModelConfig {
        vocab_size: moelab::data::VOCAB_SIZE,
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        d_ff: 8,
        max_seq_len: SEQ,
        moe: None,
    };
    LanguageModel::new(cfg, &mut stream(seed, Stream::Init)).unwrap()
}

pub fn data(n: usize, seed: u64) -> Vec<EncodedExample> {
    let cfg = SyntheticConfig {
        min_len: 1,
        max_len: 4,
        ..SyntheticConfig::default()
    };
    let limits = EncodeLimits {
        max_seq_len: SEQ,
        max_request_len: 6,
    };
    gen_mixture(&[Task::Copy, Task::Reverse], n, &cfg, &mut stream(seed, Stream::Data))
        .unwrap()
        .iter()
        .map(|p| encode(p, limits).unwrap())
        .collect()
}

pub fn distill_cfg(method: Method, steps: usize) -> DistillConfig {
    DistillConfig {
        method,
        lr_student: 1e-2,
        lr_router: 1e-2,
        batch_size: 4,
        max_steps: Some(steps),
        max_new_tokens: 8,
        ..DistillConfig::default()
    }
}

pub fn loss_bits(records: &[moelab::distill::StepRecord]) -> Vec<u64> {
    records.iter().map(|r| r.loss.to_bits()).collect()
}
