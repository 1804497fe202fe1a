use serde::{Deserialize, Serialize};

use crate::data::VOCAB_SIZE;
use crate::error::{Error, Result};

/// Mixture-of-experts settings of a teacher model.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MoeConfig {
    pub n_experts: usize,
    /// Experts activated per token under top-k routing.
    pub k: usize,
    /// Blocks whose feed-forward network is an MoE layer.
    pub layers: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_vocab")]
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    #[serde(default)]
    pub moe: Option<MoeConfig>,
}

fn default_vocab() -> usize {
    VOCAB_SIZE
}

impl ModelConfig {
    /// Desk-scale MoE teacher: 4 blocks, experts at blocks 1 and 3, 2 of 8 active.
    pub fn desk_teacher() -> Self {
        Self {
            vocab_size: VOCAB_SIZE,
            d_model: 64,
            n_layers: 4,
            n_heads: 4,
            d_ff: 128,
            max_seq_len: 64,
            moe: Some(MoeConfig {
                n_experts: 8,
                k: 2,
                layers: vec![1, 3],
            }),
        }
    }

    /// Desk-scale dense student.
    pub fn desk_student() -> Self {
        Self {
            vocab_size: VOCAB_SIZE,
            d_model: 48,
            n_layers: 4,
            n_heads: 4,
            d_ff: 96,
            max_seq_len: 64,
            moe: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::contract(format!("model config: {msg}")));
        if self.vocab_size == 0 || self.d_model == 0 || self.n_layers == 0 || self.d_ff == 0 {
            return fail("extents must be positive".into());
        }
        if self.max_seq_len == 0 {
            return fail("max_seq_len must be positive".into());
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return fail(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if let Some(moe) = &self.moe {
            if moe.n_experts == 0 || moe.k == 0 || moe.k > moe.n_experts {
                return fail(format!("need 1 <= k <= N, got k={} N={}", moe.k, moe.n_experts));
            }
            if moe.layers.is_empty() {
                return fail("MoE config without MoE layers".into());
            }
            if let Some(l) = moe.layers.iter().find(|&&l| l >= self.n_layers) {
                return fail(format!("MoE layer {l} outside [0, {})", self.n_layers));
            }
        }
        Ok(())
    }

    pub fn is_moe_layer(&self, layer: usize) -> bool {
        self.moe.as_ref().is_some_and(|m| m.layers.contains(&layer))
    }

    pub fn n_experts(&self) -> Option<usize> {
        self.moe.as_ref().map(|m| m.n_experts)
    }

    /// Number of trainable scalars implied by the configuration.
    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        let ffn = |d_ff: usize| d * d_ff + d_ff + d_ff * d + d;
        let attn = 4 * (d * d + d);
        let mut total = self.vocab_size * d + self.max_seq_len * d;
        for layer in 0..self.n_layers {
            total += 2 * d + attn + 2 * d;
            total += match &self.moe {
                Some(m) if m.layers.contains(&layer) => 2 * d * m.n_experts + m.n_experts * ffn(self.d_ff),
                _ => ffn(self.d_ff),
            };
        }
        total + 2 * d + d * self.vocab_size + self.vocab_size
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_configs_are_valid() {
        ModelConfig::desk_teacher().validate().unwrap();
        ModelConfig::desk_student().validate().unwrap();
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut c = ModelConfig::desk_teacher();
        c.n_heads = 5;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::desk_teacher();
        c.moe.as_mut().unwrap().k = 9;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::desk_teacher();
        c.moe.as_mut().unwrap().layers = vec![4];
        assert!(c.validate().is_err());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let json = r#"{"d_model":8,"n_layers":1,"n_heads":1,"d_ff":8,"max_seq_len":4,"colour":1}"#;
        assert!(serde_json::from_str::<ModelConfig>(json).is_err());
    }
}
