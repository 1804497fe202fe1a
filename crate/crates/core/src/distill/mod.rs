//! Training procedures: supervised fine-tuning, word-level KD, on-policy GKD,
//! the all-experts baseline, knowledge augmentation and the student-aware
//! router, plus teacher pretraining and the AdamW optimizer they share.

mod ka;
mod losses;
mod optim;
mod train;

pub use ka::{ka_gate, ka_select, KaSelector};
pub use losses::{forward_kl, reverse_kl, sar_loss};
pub use optim::{adamw_step, grad_norm, AdamState, AdamW, AdamWConfig};
pub use train::{
    pretrain, run, run_baseline, run_ka, run_sar, sar_objective, sar_objective_grad, sar_router_objective, Observer,
    SarTerms,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LanguageModel, SamplingParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Sft,
    Kd,
    Gkd,
    All,
    Ka,
    Sar,
}

impl Method {
    pub const EVERY: [Method; 6] = [
        Method::Sft,
        Method::Kd,
        Method::Gkd,
        Method::All,
        Method::Ka,
        Method::Sar,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Sft => "sft",
            Method::Kd => "kd",
            Method::Gkd => "gkd",
            Method::All => "all",
            Method::Ka => "ka",
            Method::Sar => "sar",
        }
    }

    pub fn needs_teacher(self) -> bool {
        self != Method::Sft
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::EVERY
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                Error::contract(format!(
                    "unknown method {s:?}; expected one of sft, kd, gkd, all, ka, sar"
                ))
            })
    }
}

/// Which divergence the router step minimizes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KlDirection {
    /// `KL(p || q)`: teacher distribution first.
    #[default]
    Forward,
    /// `KL(q || p)`.
    Reverse,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub method: Method,
    /// Probability of sampling, rather than ranking, the augmentation experts.
    pub lambda: f64,
    /// Teacher forwards (and student updates) per sampled response.
    pub augment_count: usize,
    /// Weight of the load-balancing term in the router objective.
    pub beta: f64,
    pub lr_student: f64,
    pub lr_router: f64,
    pub epochs: usize,
    /// Caps the number of outer steps when set.
    pub max_steps: Option<usize>,
    pub batch_size: usize,
    /// Experts per token under augmentation; defaults to N - 1.
    pub ka_expert_count: Option<usize>,
    /// Top-k routing for KD and GKD; defaults to the teacher's own k.
    pub teacher_k: Option<usize>,
    pub sar_kl_direction: KlDirection,
    pub sampling: SamplingParams,
    /// Longest sampled student response.
    pub max_new_tokens: usize,
    pub adam: AdamWConfig,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            method: Method::Ka,
            lambda: 0.05,
            augment_count: 2,
            beta: 0.01,
            lr_student: 1e-5,
            lr_router: 1e-5,
            epochs: 1,
            max_steps: None,
            batch_size: 16,
            ka_expert_count: None,
            teacher_k: None,
            sar_kl_direction: KlDirection::Forward,
            sampling: SamplingParams::default(),
            max_new_tokens: 32,
            adam: AdamWConfig::default(),
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::contract(format!("distill config: {msg}")));
        if !(0.0..=1.0).contains(&self.lambda) {
            return fail(format!("lambda {} outside [0, 1]", self.lambda));
        }
        if self.augment_count == 0 {
            return fail("augment_count must be at least 1".into());
        }
        if !(self.beta >= 0.0) {
            return fail(format!("beta {} is negative", self.beta));
        }
        if !(self.lr_student >= 0.0 && self.lr_router >= 0.0) {
            return fail("learning rates must be nonnegative".into());
        }
        if self.batch_size == 0 || self.max_new_tokens == 0 {
            return fail("batch_size and max_new_tokens must be positive".into());
        }
        if self.epochs == 0 && self.max_steps.is_none() {
            return fail("need epochs > 0 or max_steps".into());
        }
        self.sampling.validate()
    }

    /// Validates the fields that depend on the teacher's expert count.
    pub fn validate_for(&self, teacher: &LanguageModel) -> Result<()> {
        self.validate()?;
        let Some(n) = teacher.config.n_experts() else {
            return Ok(());
        };
        for (name, v) in [("ka_expert_count", self.ka_expert_count), ("teacher_k", self.teacher_k)] {
            if let Some(k) = v {
                if k == 0 || k > n {
                    return Err(Error::contract(format!("{name} {k} outside [1, {n}]")));
                }
            }
        }
        Ok(())
    }

    pub fn ka_count(&self, teacher: &LanguageModel) -> usize {
        self.ka_expert_count
            .unwrap_or_else(|| teacher.config.n_experts().map_or(1, |n| n.saturating_sub(1).max(1)))
    }

    pub fn teacher_k(&self, teacher: &LanguageModel) -> usize {
        self.teacher_k.unwrap_or_else(|| teacher.default_k())
    }
}

/// Teacher (or student) language-model pretraining on golden responses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub max_steps: Option<usize>,
    pub batch_size: usize,
    /// Load-balancing coefficient for MoE models.
    pub aux_coef: f64,
    /// Noisy top-k gating during training.
    pub noisy: bool,
    pub adam: AdamWConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            lr: 3e-3,
            epochs: 1,
            max_steps: None,
            batch_size: 16,
            aux_coef: 0.01,
            noisy: true,
            adam: AdamWConfig::default(),
        }
    }
}

/// One optimizer step's worth of metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// Student (or pretrained model) update index, from 0.
    pub step: usize,
    /// Index of the sampled batch; differs from `step` when several updates
    /// share one batch.
    pub outer_step: usize,
    pub method: String,
    pub loss: f64,
    pub kl: Option<f64>,
    pub lb_loss: Option<f64>,
    pub router_grad_norm: Option<f64>,
    pub wall_ms: f64,
}
