use rand::Rng;

use super::config::ModelConfig;
use crate::diffcore::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::moe::{moe_forward, Expert, GateDecision, MoeLayer, Routing};
use crate::nn::{bind, normal, param_tree, LayerNorm, Linear, ParamTree};
use crate::rng::SeededRng;

#[derive(Clone, Debug, PartialEq)]
pub struct Attention<T = Tensor> {
    pub query: Linear<T>,
    pub key: Linear<T>,
    pub value: Linear<T>,
    pub out: Linear<T>,
}
param_tree!(Attention { leaves: [], nodes: [query, key, value, out] });

#[derive(Clone, Debug, PartialEq)]
pub enum FeedForward<T = Tensor> {
    Dense(Expert<T>),
    Moe(MoeLayer<T>),
}

impl<T> ParamTree for FeedForward<T> {
    type Leaf = T;
    type Mapped<U> = FeedForward<U>;

    fn map_leaves<U>(&self, path: &str, f: &mut dyn FnMut(&str, &T) -> U) -> FeedForward<U> {
        match self {
            FeedForward::Dense(e) => FeedForward::Dense(e.map_leaves(path, f)),
            FeedForward::Moe(m) => FeedForward::Moe(m.map_leaves(path, f)),
        }
    }

    fn leaves<'a>(&'a self, path: &str, out: &mut Vec<(String, &'a T)>) {
        match self {
            FeedForward::Dense(e) => e.leaves(path, out),
            FeedForward::Moe(m) => m.leaves(path, out),
        }
    }

    fn leaves_mut<'a>(&'a mut self, path: &str, out: &mut Vec<(String, &'a mut T)>) {
        match self {
            FeedForward::Dense(e) => e.leaves_mut(path, out),
            FeedForward::Moe(m) => m.leaves_mut(path, out),
        }
    }
}

/// Pre-norm transformer block.
#[derive(Clone, Debug, PartialEq)]
pub struct Block<T = Tensor> {
    pub ln_attn: LayerNorm<T>,
    pub attn: Attention<T>,
    pub ln_ffn: LayerNorm<T>,
    pub ffn: FeedForward<T>,
}
param_tree!(Block { leaves: [], nodes: [ln_attn, attn, ln_ffn, ffn] });

#[derive(Clone, Debug, PartialEq)]
pub struct Weights<T = Tensor> {
    pub tok_embed: T,
    pub pos_embed: T,
    pub blocks: Vec<Block<T>>,
    pub ln_final: LayerNorm<T>,
    pub head: Linear<T>,
}
param_tree!(Weights { leaves: [tok_embed, pos_embed], nodes: [blocks, ln_final, head] });

/// Gate decisions of one MoE block for every token row of a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerGates {
    pub layer: usize,
    pub decisions: Vec<GateDecision>,
}

/// Auxiliary routing outputs of one MoE block, kept on the graph.
#[derive(Clone, Debug)]
pub struct MoeAux {
    pub layer: usize,
    pub probs: Var,
    pub counts: Vec<usize>,
}

pub struct ForwardOutput {
    /// `[total_tokens, vocab]`, sequences concatenated in batch order.
    pub logits: Var,
    pub bound: Weights<Var>,
    pub gates: Vec<LayerGates>,
    pub aux: Vec<MoeAux>,
    /// Row offset of each sequence in `logits`.
    pub offsets: Vec<usize>,
}

/// Per-forward options.
pub struct ForwardOptions<'a, 'r> {
    pub routing: &'a mut Routing<'r>,
    /// Router noise source; `None` disables noisy gating.
    pub noise: Option<&'a mut SeededRng>,
    /// Which parameters track gradients, by dotted name.
    pub trainable: &'a dyn Fn(&str) -> bool,
    pub collect_gates: bool,
}

pub fn no_params(_: &str) -> bool {
    false
}

pub fn all_params(_: &str) -> bool {
    true
}

/// Decoder-only language model: dense student or MoE teacher.
#[derive(Clone, Debug, PartialEq)]
pub struct LanguageModel {
    pub config: ModelConfig,
    pub weights: Weights,
}

impl LanguageModel {
    pub fn new(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let proj_std = (1.0 / d as f64).sqrt();
        let out_std = proj_std / (2.0 * config.n_layers as f64).sqrt();
        let tok_embed = normal(rng, &[config.vocab_size, d], 0.1);
        let pos_embed = normal(rng, &[config.max_seq_len, d], 0.1);
        let mut blocks = Vec::with_capacity(config.n_layers);
        for layer in 0..config.n_layers {
            let attn = Attention {
                query: Linear::init(rng, d, d, proj_std),
                key: Linear::init(rng, d, d, proj_std),
                value: Linear::init(rng, d, d, proj_std),
                out: Linear::init(rng, d, d, out_std),
            };
            let ffn = match &config.moe {
                Some(m) if m.layers.contains(&layer) => {
                    FeedForward::Moe(MoeLayer::init(rng, d, config.d_ff, m.n_experts, out_std))
                }
                _ => FeedForward::Dense(Expert::init(rng, d, config.d_ff, out_std)),
            };
            blocks.push(Block {
                ln_attn: LayerNorm::init(d),
                attn,
                ln_ffn: LayerNorm::init(d),
                ffn,
            });
        }
        let weights = Weights {
            tok_embed,
            pos_embed,
            blocks,
            ln_final: LayerNorm::init(d),
            head: Linear::init(rng, d, config.vocab_size, proj_std),
        };
        Ok(Self { config, weights })
    }

    pub fn is_moe(&self) -> bool {
        self.config.moe.is_some()
    }

    /// Default top-k routing for this model (all experts for a dense model).
    pub fn default_k(&self) -> usize {
        self.config.moe.as_ref().map_or(1, |m| m.k)
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.weights.leaves("", &mut out);
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        self.weights.leaves_mut("", &mut out);
        out
    }

    pub fn checksums(&self) -> Vec<(String, u64)> {
        self.named_params()
            .into_iter()
            .map(|(n, t)| (n, t.checksum()))
            .collect()
    }

    /// Checksum over every parameter, order-sensitive.
    pub fn checksum(&self) -> u64 {
        self.checksums()
            .iter()
            .fold(0xcbf2_9ce4_8422_2325u64, |h, (_, c)| (h ^ c).wrapping_mul(0x0100_0000_01b3))
    }

    pub fn zero_grad(&mut self) {
        crate::nn::zero_grads(&mut self.weights);
    }

    pub fn collect_grads(&mut self, out: &ForwardOutput, g: &Graph) {
        crate::nn::collect_grads(&mut self.weights, &out.bound, g);
    }

    /// Runs the model over a batch of token sequences.
    pub fn forward(
        &self,
        g: &mut Graph,
        batch: &[Vec<usize>],
        opts: ForwardOptions<'_, '_>,
    ) -> Result<ForwardOutput> {
        let ForwardOptions {
            routing,
            mut noise,
            trainable,
            collect_gates,
        } = opts;
        let cfg = &self.config;
        let mut offsets = Vec::with_capacity(batch.len());
        let mut ids = Vec::new();
        let mut positions = Vec::new();
        for seq in batch {
            if seq.is_empty() {
                return Err(Error::contract("empty sequence in forward"));
            }
            if seq.len() > cfg.max_seq_len {
                return Err(Error::contract(format!(
                    "sequence of {} tokens exceeds max_seq_len {}",
                    seq.len(),
                    cfg.max_seq_len
                )));
            }
            if let Some(t) = seq.iter().find(|&&t| t >= cfg.vocab_size) {
                return Err(Error::contract(format!("token {t} outside vocabulary")));
            }
            offsets.push(ids.len());
            ids.extend_from_slice(seq);
            positions.extend(0..seq.len());
        }
        if ids.is_empty() {
            return Err(Error::contract("empty batch in forward"));
        }
        let lens: Vec<usize> = batch.iter().map(Vec::len).collect();

        let w = bind(&self.weights, g, trainable);
        let tok = g.embedding(w.tok_embed, &ids)?;
        let pos = g.embedding(w.pos_embed, &positions)?;
        let mut x = g.add(tok, pos)?;

        let mut gates = Vec::new();
        let mut aux = Vec::new();
        let mut moe_index = 0;
        for (layer, block) in w.blocks.iter().enumerate() {
            let h = block.ln_attn.forward(g, x)?;
            let a = self.attention(g, &block.attn, h, &offsets, &lens)?;
            x = g.add(x, a)?;
            let h = block.ln_ffn.forward(g, x)?;
            let f = match &block.ffn {
                FeedForward::Dense(e) => e.forward(g, h)?,
                FeedForward::Moe(m) => {
                    let o = moe_forward(g, h, m, routing, noise.as_deref_mut(), (layer, moe_index))?;
                    moe_index += 1;
                    if collect_gates {
                        gates.push(LayerGates {
                            layer,
                            decisions: o.decisions,
                        });
                    }
                    aux.push(MoeAux {
                        layer,
                        probs: o.probs,
                        counts: o.counts,
                    });
                    o.out
                }
            };
            x = g.add(x, f)?;
        }
        let h = w.ln_final.forward(g, x)?;
        let logits = w.head.forward(g, h)?;
        Ok(ForwardOutput {
            logits,
            bound: w,
            gates,
            aux,
            offsets,
        })
    }

    /// Causal multi-head self-attention, evaluated sequence by sequence.
    fn attention(
        &self,
        g: &mut Graph,
        attn: &Attention<Var>,
        x: Var,
        offsets: &[usize],
        lens: &[usize],
    ) -> Result<Var> {
        let heads = self.config.n_heads;
        let dh = self.config.d_model / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let q = attn.query.forward(g, x)?;
        let k = attn.key.forward(g, x)?;
        let v = attn.value.forward(g, x)?;
        let mut per_seq = Vec::with_capacity(lens.len());
        for (&start, &len) in offsets.iter().zip(lens) {
            let keep: Vec<bool> = (0..len * len).map(|i| i % len <= i / len).collect();
            let qs = g.slice_rows(q, start, len)?;
            let ks = g.slice_rows(k, start, len)?;
            let vs = g.slice_rows(v, start, len)?;
            let mut outs = Vec::with_capacity(heads);
            for head in 0..heads {
                let qh = g.slice_cols(qs, head * dh, dh)?;
                let kh = g.slice_cols(ks, head * dh, dh)?;
                let vh = g.slice_cols(vs, head * dh, dh)?;
                let kt = g.transpose(kh)?;
                let scores = g.matmul(qh, kt)?;
                let scores = g.scale(scores, scale);
                let scores = g.mask_fill(scores, &keep)?;
                let weights = g.softmax(scores, 1)?;
                outs.push(g.matmul(weights, vh)?);
            }
            per_seq.push(if heads == 1 { outs[0] } else { g.concat_cols(&outs)? });
        }
        let joined = if per_seq.len() == 1 {
            per_seq[0]
        } else {
            g.concat_rows(&per_seq)?
        };
        attn.out.forward(g, joined)
    }
}

/// Names of every parameter in the router of an MoE block.
pub fn router_param(name: &str) -> bool {
    crate::moe::is_router_param(name)
}
