use rand::Rng;
use serde::{Deserialize, Serialize};

use super::LanguageModel;
use crate::data::EOS;
use crate::diffcore::softmax;
use crate::error::{Error, Result};
use crate::moe::Routing;

/// Temperature, top-k and nucleus filtering. `top_k = 0` disables top-k;
/// the defaults sample from the raw softmax.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingParams {
    pub temperature: f64,
    pub top_k: usize,
    pub top_p: f64,
}

impl Default for SamplingParams {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            top_k: 0,
            top_p: 1.0,
        }
    }
}

impl SamplingParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::contract(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::contract(format!("top_p must be in (0, 1], got {}", self.top_p)));
        }
        Ok(())
    }
}

/// Token choice rule. `Greedy` is the zero-temperature limit.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Decoding {
    Greedy,
    Sample(SamplingParams),
}

/// Picks the next token from a logit row.
pub fn sample_token(logits: &[f64], decoding: Decoding, rng: &mut impl Rng) -> Result<usize> {
    let params = match decoding {
        Decoding::Greedy => {
            let mut best = 0;
            for (i, &v) in logits.iter().enumerate() {
                if v > logits[best] {
                    best = i;
                }
            }
            return Ok(best);
        }
        Decoding::Sample(p) => p,
    };
    params.validate()?;
    let scaled: Vec<f64> = logits.iter().map(|l| l / params.temperature).collect();
    let mut probs = softmax(&scaled)?;

    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let mut keep = order.len();
    if params.top_k > 0 {
        keep = keep.min(params.top_k);
    }
    if params.top_p < 1.0 {
        let mut mass = 0.0;
        for (n, &i) in order.iter().enumerate().take(keep) {
            mass += probs[i];
            if mass >= params.top_p {
                keep = n + 1;
                break;
            }
        }
    }
    for &i in &order[keep..] {
        probs[i] = 0.0;
    }
    let total: f64 = probs.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for &i in &order[..keep] {
        u -= probs[i];
        if u < 0.0 {
            return Ok(i);
        }
    }
    Ok(order[keep - 1])
}

/// Autoregressive continuation of every prompt, decoded as one batch.
///
/// A sequence stops after emitting EOS, after `max_new` tokens, or when it
/// reaches `max_seq_len`. The returned continuations include the EOS token
/// when one was produced.
pub fn generate(
    model: &LanguageModel,
    prompts: &[Vec<usize>],
    max_new: usize,
    decoding: Decoding,
    routing: &mut Routing<'_>,
    rng: &mut impl Rng,
) -> Result<Vec<Vec<usize>>> {
    let max_len = model.config.max_seq_len;
    if let Some(p) = prompts.iter().find(|p| p.is_empty() || p.len() > max_len) {
        return Err(Error::contract(format!(
            "prompt of {} tokens outside [1, {max_len}]",
            p.len()
        )));
    }
    let mut seqs: Vec<Vec<usize>> = prompts.to_vec();
    let mut out = vec![Vec::new(); prompts.len()];
    let mut active: Vec<usize> = (0..prompts.len())
        .filter(|&i| max_new > 0 && seqs[i].len() < max_len)
        .collect();
    while !active.is_empty() {
        let batch: Vec<Vec<usize>> = active.iter().map(|&i| seqs[i].clone()).collect();
        let inf = model.infer(&batch, routing, false)?;
        let mut still = Vec::with_capacity(active.len());
        for (b, &i) in active.iter().enumerate() {
            let last = inf.sequence_rows(b).end - 1;
            let tok = sample_token(inf.logits.row(last), decoding, rng)?;
            seqs[i].push(tok);
            out[i].push(tok);
            if tok != EOS && out[i].len() < max_new && seqs[i].len() < max_len {
                still.push(i);
            }
        }
        active = still;
    }
    Ok(out)
}

/// Samples one continuation of `prompt` under the given filtering rules.
pub fn sample(
    model: &LanguageModel,
    prompt: &[usize],
    max_new: usize,
    params: SamplingParams,
    rng: &mut impl Rng,
) -> Result<Vec<usize>> {
    let mut routing = Routing::TopK(model.default_k());
    let mut out = generate(
        model,
        &[prompt.to_vec()],
        max_new,
        Decoding::Sample(params),
        &mut routing,
        rng,
    )?;
    Ok(out.remove(0))
}
