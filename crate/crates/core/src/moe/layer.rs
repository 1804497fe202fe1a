use rand::Rng;

use super::router::{draw_noise, gate_logits, selection_mask, top_k_indices, GateDecision, RouterParams};
use crate::diffcore::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{normal, param_tree, Linear, ParamTree};

/// Two-layer GELU feed-forward network `d_model -> d_ff -> d_model`.
#[derive(Clone, Debug, PartialEq)]
pub struct Expert<T = Tensor> {
    pub up: Linear<T>,
    pub down: Linear<T>,
}
param_tree!(Expert { leaves: [], nodes: [up, down] });

impl Expert<Tensor> {
    pub fn init(rng: &mut impl Rng, d_model: usize, d_ff: usize, out_std: f64) -> Self {
        Self {
            up: Linear::init(rng, d_model, d_ff, (1.0 / d_model as f64).sqrt()),
            down: Linear::init(rng, d_ff, d_model, out_std),
        }
    }
}

impl Expert<Var> {
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.up.forward(g, x)?;
        let h = g.gelu(h);
        self.down.forward(g, h)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MoeLayer<T = Tensor> {
    pub router: RouterParams<T>,
    pub experts: Vec<Expert<T>>,
}
param_tree!(MoeLayer { leaves: [], nodes: [router, experts] });

impl MoeLayer<Tensor> {
    /// Gate projection starts small and random, noise projection at zero.
    pub fn init(rng: &mut impl Rng, d_model: usize, d_ff: usize, n_experts: usize, out_std: f64) -> Self {
        let router = RouterParams {
            w_gate: normal(rng, &[d_model, n_experts], (1.0 / d_model as f64).sqrt()),
            w_noise: Tensor::zeros(&[d_model, n_experts]),
        };
        let experts = (0..n_experts)
            .map(|_| Expert::init(rng, d_model, d_ff, out_std))
            .collect();
        Self { router, experts }
    }
}

/// Where a routing decision is being made.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RouteSite {
    /// Transformer block index.
    pub layer: usize,
    /// Ordinal among the MoE blocks.
    pub moe_index: usize,
    /// Token row within the batch.
    pub token: usize,
}

/// Externally driven expert selection (knowledge augmentation, fixed sets).
pub trait ExpertSelector {
    fn select(&mut self, site: RouteSite, logits: &[f64]) -> Result<Vec<usize>>;
}

pub enum Routing<'a> {
    /// KeepTopK with `k` experts.
    TopK(usize),
    /// Every expert, gates renormalized over all N.
    All,
    Select(&'a mut dyn ExpertSelector),
}

impl std::fmt::Debug for Routing<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Routing::TopK(k) => write!(f, "TopK({k})"),
            Routing::All => write!(f, "All"),
            Routing::Select(_) => write!(f, "Select"),
        }
    }
}

/// Replays predetermined expert sets, indexed `[moe_index][token]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FixedSelection {
    pub sets: Vec<Vec<Vec<usize>>>,
}

impl ExpertSelector for FixedSelection {
    fn select(&mut self, site: RouteSite, _logits: &[f64]) -> Result<Vec<usize>> {
        self.sets
            .get(site.moe_index)
            .and_then(|layer| layer.get(site.token))
            .cloned()
            .ok_or_else(|| Error::contract(format!("no fixed expert set for {site:?}")))
    }
}

pub struct MoeOutput {
    pub out: Var,
    /// Gate probabilities `[tokens, N]`, zero off the selected sets.
    pub probs: Var,
    /// Tokens routed to each expert.
    pub counts: Vec<usize>,
    pub decisions: Vec<GateDecision>,
}

/// Routes each row of `x` and returns the gate-weighted sum of the selected
/// experts' outputs. Only selected experts are evaluated, each on the rows
/// routed to it.
pub fn moe_forward(
    g: &mut Graph,
    x: Var,
    layer: &MoeLayer<Var>,
    routing: &mut Routing<'_>,
    noise: Option<&mut crate::rng::SeededRng>,
    site: (usize, usize),
) -> Result<MoeOutput> {
    let n = layer.experts.len();
    let rows = g.value(x).rows();
    let eps = noise.map(|rng| draw_noise(rng, rows, n));
    let noisy = eps.is_some();
    let logits = gate_logits(g, x, &layer.router, eps.as_ref())?;

    let h = g.data(logits).to_vec();
    let mut keep = Vec::with_capacity(rows * n);
    let mut selections = Vec::with_capacity(rows);
    for t in 0..rows {
        let row = &h[t * n..(t + 1) * n];
        let selected = match routing {
            Routing::TopK(k) => top_k_indices(row, *k)?,
            Routing::All => (0..n).collect(),
            Routing::Select(sel) => {
                let mut s = sel.select(
                    RouteSite {
                        layer: site.0,
                        moe_index: site.1,
                        token: t,
                    },
                    row,
                )?;
                s.sort_unstable();
                s
            }
        };
        keep.extend(selection_mask(&selected, n)?);
        selections.push(selected);
    }

    let masked = g.mask_fill(logits, &keep)?;
    let probs = g.softmax(masked, 1)?;

    let mut counts = vec![0; n];
    let mut out: Option<Var> = None;
    for (e, expert) in layer.experts.iter().enumerate() {
        let idx: Vec<usize> = (0..rows).filter(|&t| keep[t * n + e]).collect();
        counts[e] = idx.len();
        if idx.is_empty() {
            continue;
        }
        let xe = g.gather_rows(x, &idx)?;
        let ye = expert.forward(g, xe)?;
        let pe = g.gather_rows(probs, &idx)?;
        let ge = g.slice_cols(pe, e, 1)?;
        let weighted = g.scale_rows(ye, ge)?;
        let placed = g.scatter_rows(weighted, &idx, rows)?;
        out = Some(match out {
            Some(acc) => g.add(acc, placed)?,
            None => placed,
        });
    }

    let p = g.data(probs);
    let decisions = selections
        .into_iter()
        .enumerate()
        .map(|(t, selected)| GateDecision {
            logits: h[t * n..(t + 1) * n].to_vec(),
            selected,
            probs: p[t * n..(t + 1) * n].to_vec(),
            noise_applied: noisy,
        })
        .collect();

    Ok(MoeOutput {
        out: out.expect("every token selects at least one expert"),
        probs,
        counts,
        decisions,
    })
}

/// Names of router leaves, for selective training.
pub fn is_router_param(name: &str) -> bool {
    name.contains(".router.") || name.starts_with("router.")
}

impl MoeLayer<Tensor> {
    pub fn router_checksums(&self) -> Vec<(String, u64)> {
        let mut leaves = Vec::new();
        self.router.leaves("router", &mut leaves);
        leaves.into_iter().map(|(n, t)| (n, t.checksum())).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::bind;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_layer(seed: u64, d: usize, n: usize) -> MoeLayer {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        MoeLayer::init(&mut rng, d, 2 * d, n, 0.3)
    }

    fn run(layer: &MoeLayer, x: &Tensor, routing: &mut Routing) -> (Vec<f64>, Vec<GateDecision>) {
        let mut g = Graph::new();
        let lv = bind(layer, &mut g, &|_| false);
        let xv = g.constant(x.clone());
        let o = moe_forward(&mut g, xv, &lv, routing, None, (0, 0)).unwrap();
        (g.data(o.out).to_vec(), o.decisions)
    }

    #[test]
    fn single_expert_all_mode_is_the_expert() {
        let layer = random_layer(1, 4, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = normal(&mut rng, &[3, 4], 1.0);
        let (out, _) = run(&layer, &x, &mut Routing::All);
        let mut g = Graph::new();
        let ev = bind(&layer.experts[0], &mut g, &|_| false);
        let xv = g.constant(x);
        let direct = ev.forward(&mut g, xv).unwrap();
        // every token is routed with probability exactly 1
        assert_eq!(out, g.data(direct));
    }

    #[test]
    fn top_n_is_bit_identical_to_all() {
        for seed in 0..10 {
            let layer = random_layer(seed, 6, 4);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
            let x = normal(&mut rng, &[5, 6], 1.0);
            let (a, da) = run(&layer, &x, &mut Routing::All);
            let (b, db) = run(&layer, &x, &mut Routing::TopK(4));
            assert_eq!(
                a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
            assert_eq!(da, db);
        }
    }

    #[test]
    fn hand_set_gates_weight_constant_experts() {
        // Router sends x = e0 to logits (ln .25, ln .75); experts emit constants.
        let d = 2;
        let mut layer = random_layer(3, d, 2);
        layer.router.w_gate =
            Tensor::from_rows(&[vec![0.25f64.ln(), 0.75f64.ln()], vec![0.0, 0.0]]);
        let (a, b) = ([1.0, -2.0], [4.0, 0.5]);
        for (e, c) in layer.experts.iter_mut().zip([a, b]) {
            e.down.weight = Tensor::zeros(e.down.weight.shape());
            e.down.bias = Tensor::vector(c.to_vec());
        }
        let x = Tensor::from_rows(&[vec![1.0, 0.0]]);
        let (out, dec) = run(&layer, &x, &mut Routing::All);
        assert!((dec[0].probs[0] - 0.25).abs() < 1e-15);
        for j in 0..d {
            assert!((out[j] - (0.25 * a[j] + 0.75 * b[j])).abs() < 1e-12);
        }
    }

    #[test]
    fn probabilities_are_distributions_over_selected_set() {
        let layer = random_layer(4, 6, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = normal(&mut rng, &[7, 6], 1.0);
        for k in 1..=5 {
            let (_, decs) = run(&layer, &x, &mut Routing::TopK(k));
            for d in decs {
                assert_eq!(d.selected.len(), k);
                assert!((d.probs.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
                for (i, &p) in d.probs.iter().enumerate() {
                    assert!(p == 0.0 || d.selected.contains(&i));
                }
            }
        }
    }

    #[test]
    fn fixed_selection_replays_sets() {
        let layer = random_layer(6, 4, 3);
        let x = normal(&mut ChaCha8Rng::seed_from_u64(1), &[2, 4], 1.0);
        let mut fixed = FixedSelection {
            sets: vec![vec![vec![2], vec![0, 1]]],
        };
        let (_, decs) = run(&layer, &x, &mut Routing::Select(&mut fixed));
        assert_eq!(decs[0].selected, vec![2]);
        assert_eq!(decs[0].probs[2], 1.0);
        assert_eq!(decs[1].selected, vec![0, 1]);
    }

    #[test]
    fn routing_without_noise_is_repeatable() {
        let layer = random_layer(7, 4, 4);
        let x = normal(&mut ChaCha8Rng::seed_from_u64(2), &[6, 4], 1.0);
        let a = run(&layer, &x, &mut Routing::TopK(2));
        let b = run(&layer, &x, &mut Routing::TopK(2));
        assert_eq!(a, b);
    }

    #[test]
    fn invalid_selection_is_rejected() {
        struct Bad;
        impl ExpertSelector for Bad {
            fn select(&mut self, _: RouteSite, _: &[f64]) -> Result<Vec<usize>> {
                Ok(vec![1, 1])
            }
        }
        let layer = random_layer(8, 4, 3);
        let x = Tensor::zeros(&[1, 4]);
        let mut g = Graph::new();
        let lv = bind(&layer, &mut g, &|_| false);
        let xv = g.constant(x);
        let mut bad = Bad;
        let r = moe_forward(&mut g, xv, &lv, &mut Routing::Select(&mut bad), None, (0, 0));
        assert!(matches!(r, Err(Error::Contract(_))));
    }
}
