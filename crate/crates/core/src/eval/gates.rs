use serde::{Deserialize, Serialize};

use super::RouteMode;
use crate::data::EncodedExample;
use crate::diffcore::kl_row;
use crate::error::{Error, Result};
use crate::model::{LanguageModel, LayerGates};
use crate::moe::Routing;

/// Gate probabilities at one MoE block, for one token.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateTrace {
    pub layer: usize,
    /// Softmax over all N logits, before selection.
    pub full_probs: Vec<f64>,
    pub selected: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub layer: usize,
    pub activated_mass: f64,
    pub nonactivated_mass: f64,
    pub tokens: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShiftReport {
    pub layer: usize,
    pub mean_kl: f64,
    pub max_kl: f64,
    pub tokens: usize,
}

fn teacher_gates(
    teacher: &LanguageModel,
    seqs: &[Vec<usize>],
    mode: RouteMode,
) -> Result<Vec<LayerGates>> {
    let mut routing = mode.routing();
    Ok(teacher.infer(seqs, &mut routing, true)?.gates)
}

/// Gate traces of every token position of one sequence, noise off.
pub fn gate_traces(teacher: &LanguageModel, tokens: &[usize], mode: RouteMode) -> Result<Vec<Vec<GateTrace>>> {
    let gates = teacher_gates(teacher, &[tokens.to_vec()], mode)?;
    Ok(gates
        .into_iter()
        .map(|lg| {
            lg.decisions
                .iter()
                .map(|d| GateTrace {
                    layer: lg.layer,
                    full_probs: d.full_probs(),
                    selected: d.selected.clone(),
                })
                .collect()
        })
        .collect())
}

fn require_moe(teacher: &LanguageModel) -> Result<()> {
    if teacher.is_moe() {
        Ok(())
    } else {
        Err(Error::contract("gate analysis needs a teacher with MoE layers"))
    }
}

/// Mean share of full-softmax gate mass landing on the top-`k` experts, per
/// MoE block, over the loss positions of `dataset` (noise off).
pub fn activated_mass_report(
    teacher: &LanguageModel,
    dataset: &[EncodedExample],
    k: usize,
) -> Result<Vec<LayerReport>> {
    require_moe(teacher)?;
    let n = teacher.config.n_experts().unwrap_or(0);
    if k == 0 || k > n {
        return Err(Error::contract(format!("k={k} outside [1, {n}]")));
    }
    let layers = &teacher.config.moe.as_ref().expect("checked").layers;
    let mut sums = vec![0.0; layers.len()];
    let mut tokens = 0usize;
    for chunk in dataset.chunks(32) {
        let views: Vec<_> = chunk.iter().map(EncodedExample::lm_view).collect();
        let seqs: Vec<Vec<usize>> = views.iter().map(|v| v.inputs.clone()).collect();
        let mask: Vec<bool> = views.iter().flat_map(|v| v.loss_mask.iter().copied()).collect();
        let gates = teacher_gates(teacher, &seqs, RouteMode::TopK(k))?;
        for (slot, lg) in gates.iter().enumerate() {
            for (d, _) in lg.decisions.iter().zip(&mask).filter(|(_, &m)| m) {
                let full = d.full_probs();
                sums[slot] += d.selected.iter().map(|&e| full[e]).sum::<f64>();
            }
        }
        tokens += mask.iter().filter(|&&m| m).count();
    }
    if tokens == 0 {
        return Err(Error::contract("activated-mass report over no response tokens"));
    }
    Ok(layers
        .iter()
        .zip(sums)
        .map(|(&layer, s)| {
            let activated = (s / tokens as f64).clamp(0.0, 1.0);
            LayerReport {
                layer,
                activated_mass: activated,
                nonactivated_mass: 1.0 - activated,
                tokens,
            }
        })
        .collect())
}

/// Per MoE block, `KL(softmax(H_before) || softmax(H_after))` over all N
/// experts, aggregated over every token position of `dataset` (noise off).
pub fn router_shift_report(
    before: &LanguageModel,
    after: &LanguageModel,
    dataset: &[EncodedExample],
    mode: RouteMode,
) -> Result<Vec<ShiftReport>> {
    require_moe(before)?;
    if before.config != after.config {
        return Err(Error::contract("router shift between different architectures"));
    }
    let layers = &before.config.moe.as_ref().expect("checked").layers;
    let mut sums = vec![0.0; layers.len()];
    let mut maxes = vec![0.0f64; layers.len()];
    let mut tokens = 0usize;
    for chunk in dataset.chunks(32) {
        let seqs: Vec<Vec<usize>> = chunk.iter().map(|e| e.lm_view().inputs).collect();
        let a = teacher_gates(before, &seqs, mode)?;
        let b = teacher_gates(after, &seqs, mode)?;
        for (slot, (la, lb)) in a.iter().zip(&b).enumerate() {
            for (da, db) in la.decisions.iter().zip(&lb.decisions) {
                let pa = crate::diffcore::log_softmax(&da.logits);
                let pb = crate::diffcore::log_softmax(&db.logits);
                let kl = kl_row(&pa, &pb).max(0.0);
                sums[slot] += kl;
                maxes[slot] = maxes[slot].max(kl);
            }
        }
        tokens += seqs.iter().map(Vec::len).sum::<usize>();
    }
    if tokens == 0 {
        return Err(Error::contract("router shift over an empty dataset"));
    }
    Ok(layers
        .iter()
        .enumerate()
        .map(|(slot, &layer)| ShiftReport {
            layer,
            mean_kl: sums[slot] / tokens as f64,
            max_kl: maxes[slot],
            tokens,
        })
        .collect())
}

impl RouteMode {
    pub fn routing(self) -> Routing<'static> {
        match self {
            RouteMode::TopK(k) => Routing::TopK(k),
            RouteMode::All => Routing::All,
        }
    }
}
