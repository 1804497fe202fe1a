//! Toy decoder-only transformers: the dense student and the MoE teacher,
//! next-token distributions and autoregressive decoding.

mod config;
mod generate;
mod transformer;

pub use config::{ModelConfig, MoeConfig};
pub use generate::{generate, sample, sample_token, Decoding, SamplingParams};
pub use transformer::{
    all_params, no_params, router_param, Attention, Block, FeedForward, ForwardOptions,
    ForwardOutput, LanguageModel, LayerGates, MoeAux, Weights,
};

use crate::diffcore::{log_softmax, Graph, Tensor};
use crate::error::Result;
use crate::moe::Routing;

/// Next-token distribution at one position.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenDistribution {
    pub probs: Vec<f64>,
    pub log_probs: Vec<f64>,
}

impl TokenDistribution {
    pub fn from_logits(logits: &[f64]) -> Self {
        let log_probs = log_softmax(logits);
        let probs = log_probs.iter().map(|l| l.exp()).collect();
        Self { probs, log_probs }
    }

    /// Wraps explicit probabilities; zeros get `-inf` log-probabilities.
    pub fn from_probs(probs: Vec<f64>) -> Self {
        let log_probs = probs.iter().map(|p| p.ln()).collect();
        Self { probs, log_probs }
    }

    pub fn vocab(&self) -> usize {
        self.probs.len()
    }
}

/// Logits and gate traces of a gradient-free forward pass.
pub struct Inference {
    /// `[total_tokens, vocab]`, sequences concatenated in batch order.
    pub logits: Tensor,
    pub offsets: Vec<usize>,
    pub gates: Vec<LayerGates>,
}

impl Inference {
    /// Logit rows of sequence `i`.
    pub fn sequence_rows(&self, i: usize) -> std::ops::Range<usize> {
        let end = self.offsets.get(i + 1).copied().unwrap_or(self.logits.rows());
        self.offsets[i]..end
    }
}

impl LanguageModel {
    /// Forward pass with every parameter held constant and router noise off.
    pub fn infer(
        &self,
        batch: &[Vec<usize>],
        routing: &mut Routing<'_>,
        collect_gates: bool,
    ) -> Result<Inference> {
        let mut g = Graph::new();
        let out = self.forward(
            &mut g,
            batch,
            ForwardOptions {
                routing,
                noise: None,
                trainable: &no_params,
                collect_gates,
            },
        )?;
        Ok(Inference {
            logits: g.value(out.logits).clone(),
            offsets: out.offsets,
            gates: out.gates,
        })
    }
}

/// Per-position next-token distributions of one sequence.
pub fn log_distribution(
    model: &LanguageModel,
    tokens: &[usize],
    routing: &mut Routing<'_>,
) -> Result<Vec<TokenDistribution>> {
    let inf = model.infer(&[tokens.to_vec()], routing, false)?;
    Ok((0..inf.logits.rows())
        .map(|r| TokenDistribution::from_logits(inf.logits.row(r)))
        .collect())
}
