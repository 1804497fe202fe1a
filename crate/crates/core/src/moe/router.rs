use rand::Rng;
use rand_distr::StandardNormal;

use crate::diffcore::{softmax, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::param_tree;

/// Gate projection and noise-scale projection of one MoE layer, both
/// `[d_model, n_experts]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RouterParams<T = Tensor> {
    pub w_gate: T,
    pub w_noise: T,
}
param_tree!(RouterParams { leaves: [w_gate, w_noise], nodes: [] });

impl RouterParams<Tensor> {
    pub fn n_experts(&self) -> usize {
        self.w_gate.shape()[1]
    }
}

/// Per-token routing record.
#[derive(Clone, Debug, PartialEq)]
pub struct GateDecision {
    /// Gate logits `H(x)`, length N.
    pub logits: Vec<f64>,
    /// Selected expert indices, ascending.
    pub selected: Vec<usize>,
    /// Renormalized gate probabilities, zero outside `selected`.
    pub probs: Vec<f64>,
    pub noise_applied: bool,
}

impl GateDecision {
    /// Softmax over all N logits, before any selection.
    pub fn full_probs(&self) -> Vec<f64> {
        softmax(&self.logits).expect("finite logits")
    }
}

/// Standard-normal draws for `rows` tokens and `n` experts, token-major.
pub fn draw_noise(rng: &mut impl Rng, rows: usize, n: usize) -> Tensor {
    let data = (0..rows * n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(vec![rows, n], data).expect("shape matches")
}

/// Gate logits for a batch of token rows `x: [rows, d_model]`.
///
/// With `noise = Some(eps)` this is `x W_g + eps * softplus(x W_noise)`,
/// otherwise `x W_g`. The draws are constants, so gradients reach both
/// projections through the reparameterized path.
pub fn gate_logits(
    g: &mut Graph,
    x: Var,
    router: &RouterParams<Var>,
    noise: Option<&Tensor>,
) -> Result<Var> {
    let clean = g.matmul(x, router.w_gate)?;
    let Some(eps) = noise else { return Ok(clean) };
    if eps.shape() != g.shape(clean) {
        return Err(Error::shape(
            "gate_logits",
            format!("noise {:?} vs logits {:?}", eps.shape(), g.shape(clean)),
        ));
    }
    let raw = g.matmul(x, router.w_noise)?;
    let scale = g.softplus(raw);
    let eps = g.constant(eps.clone());
    let jitter = g.mul(eps, scale)?;
    g.add(clean, jitter)
}

/// Indices of the `k` largest entries, ascending; ties go to the lower index.
pub fn top_k_indices(v: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > v.len() {
        return Err(Error::contract(format!("top-k with k={k} over {} entries", v.len())));
    }
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[b].total_cmp(&v[a]).then(a.cmp(&b)));
    let mut picked = order[..k].to_vec();
    picked.sort_unstable();
    Ok(picked)
}

/// Keeps the top-`k` entries and writes `-inf` everywhere else.
pub fn keep_top_k(v: &[f64], k: usize) -> Result<Vec<f64>> {
    let picked = top_k_indices(v, k)?;
    let mut out = vec![f64::NEG_INFINITY; v.len()];
    for i in picked {
        out[i] = v[i];
    }
    Ok(out)
}

/// Softmax over the kept entries of `logits`, zero elsewhere.
pub fn gate_probs(logits: &[f64], keep: &[bool]) -> Result<GateDecision> {
    if keep.len() != logits.len() {
        return Err(Error::shape(
            "gate_probs",
            format!("{} flags for {} logits", keep.len(), logits.len()),
        ));
    }
    let selected: Vec<usize> = (0..keep.len()).filter(|&i| keep[i]).collect();
    if selected.is_empty() {
        return Err(Error::DegenerateSlice { op: "gate_probs" });
    }
    let masked: Vec<f64> = logits
        .iter()
        .zip(keep)
        .map(|(&x, &k)| if k { x } else { f64::NEG_INFINITY })
        .collect();
    Ok(GateDecision {
        logits: logits.to_vec(),
        selected,
        probs: softmax(&masked)?,
        noise_applied: false,
    })
}

/// Validates a selection against `n` experts and returns its keep-mask.
pub(crate) fn selection_mask(selected: &[usize], n: usize) -> Result<Vec<bool>> {
    if selected.is_empty() {
        return Err(Error::contract("empty expert selection"));
    }
    let mut keep = vec![false; n];
    for &i in selected {
        if i >= n || keep[i] {
            return Err(Error::contract(format!(
                "invalid expert selection {selected:?} over {n} experts"
            )));
        }
        keep[i] = true;
    }
    Ok(keep)
}
