use rand::Rng;

use crate::diffcore::softmax;
use crate::error::{Error, Result};
use crate::moe::{gate_probs, top_k_indices, ExpertSelector, GateDecision, RouteSite};
use crate::rng::SeededRng;

/// Knowledge-augmentation expert selection for one token.
///
/// With probability `lambda`, draws `count` distinct experts by sequential
/// weighted sampling without replacement from `gate_probs`; otherwise takes
/// the `count` most probable experts. Returned indices are ascending.
pub fn ka_select(
    gate_probs: &[f64],
    lambda: f64,
    count: usize,
    rng: &mut impl Rng,
) -> Result<Vec<usize>> {
    select(gate_probs, gate_probs, lambda, count, rng)
}

fn select(
    ranking: &[f64],
    probs: &[f64],
    lambda: f64,
    count: usize,
    rng: &mut impl Rng,
) -> Result<Vec<usize>> {
    let n = probs.len();
    if count == 0 || count > n {
        return Err(Error::contract(format!("cannot select {count} of {n} experts")));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::contract(format!("lambda {lambda} outside [0, 1]")));
    }
    let mut chosen = if rng.random::<f64>() < lambda {
        sample_without_replacement(probs, count, rng)
    } else {
        top_k_indices(ranking, count)?
    };
    chosen.sort_unstable();
    Ok(chosen)
}

fn sample_without_replacement(probs: &[f64], count: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut weights = probs.to_vec();
    let mut chosen = Vec::with_capacity(count);
    for _ in 0..count {
        let total: f64 = weights.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = None;
            for (i, &w) in weights.iter().enumerate() {
                if w <= 0.0 {
                    continue;
                }
                u -= w;
                pick = Some(i);
                if u < 0.0 {
                    break;
                }
            }
            pick.expect("positive total has a positive weight")
        } else {
            // Only zero-probability experts remain: take the lowest index.
            (0..weights.len())
                .find(|i| !chosen.contains(i))
                .expect("count <= n")
        };
        chosen.push(pick);
        weights[pick] = 0.0;
    }
    chosen
}

/// Gate restricted to the experts in `selected`.
pub fn ka_gate(logits: &[f64], selected: &[usize]) -> Result<GateDecision> {
    if selected.is_empty() {
        return Err(Error::contract("knowledge augmentation gate over an empty expert set"));
    }
    let n = logits.len();
    let mut keep = vec![false; n];
    for &e in selected {
        if e >= n {
            return Err(Error::contract(format!("expert {e} of {n}")));
        }
        keep[e] = true;
    }
    gate_probs(logits, &keep)
}

/// Expert selector drawing a fresh augmentation mask per token and MoE layer.
pub struct KaSelector<'a> {
    pub lambda: f64,
    pub count: usize,
    pub rng: &'a mut SeededRng,
}

impl ExpertSelector for KaSelector<'_> {
    fn select(&mut self, _site: RouteSite, logits: &[f64]) -> Result<Vec<usize>> {
        let probs = softmax(logits)?;
        // Rank by logit so the deterministic branch matches top-k routing exactly.
        select(logits, &probs, self.lambda, self.count, self.rng)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};
    use proptest::prelude::*;

    #[test]
    fn lambda_zero_is_top_count() {
        let mut rng = stream(0, Stream::Augment);
        for _ in 0..20 {
            let e = ka_select(&[0.1, 0.5, 0.15, 0.25], 0.0, 3, &mut rng).unwrap();
            assert_eq!(e, vec![1, 2, 3]);
        }
    }

    #[test]
    fn lambda_one_follows_gate_probabilities() {
        let mut rng = stream(1, Stream::Augment);
        let n = 10_000;
        let zeros = (0..n)
            .filter(|_| ka_select(&[0.9, 0.1], 1.0, 1, &mut rng).unwrap() == vec![0])
            .count();
        assert!((zeros as f64 / n as f64 - 0.9).abs() <= 0.02);
    }

    #[test]
    fn gate_over_subset() {
        let d = ka_gate(&[3.0, 1.0, 2.0], &[0, 2]).unwrap();
        assert!((d.probs[0] - 0.7311).abs() < 1e-4);
        assert_eq!(d.probs[1], 0.0);
        assert!((d.probs[2] - 0.2689).abs() < 1e-4);
        assert!(ka_gate(&[1.0, 2.0], &[]).is_err());
    }

    #[test]
    fn two_experts_lambda_zero_is_greedy_single_expert() {
        let mut rng = stream(2, Stream::Augment);
        let logits = [0.3, 1.2];
        let probs = softmax(&logits).unwrap();
        let e = ka_select(&probs, 0.0, 1, &mut rng).unwrap();
        let d = ka_gate(&logits, &e).unwrap();
        assert_eq!(d.probs, vec![0.0, 1.0]);
    }

    proptest! {
        #[test]
        fn draws_are_distinct_and_sized(
            raw in proptest::collection::vec(0.0f64..1.0, 2..8),
            lambda in 0.0f64..=1.0,
            seed in any::<u64>(),
            frac in 0.0f64..1.0,
        ) {
            let n = raw.len();
            let total: f64 = raw.iter().sum::<f64>() + 1e-9;
            let probs: Vec<f64> = raw.iter().map(|r| r / total).collect();
            let count = 1 + ((n - 1) as f64 * frac) as usize;
            let mut rng = stream(seed, Stream::Augment);
            let e = ka_select(&probs, lambda, count, &mut rng).unwrap();
            prop_assert_eq!(e.len(), count);
            prop_assert!(e.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(e.iter().all(|&i| i < n));
            let d = ka_gate(&probs, &e).unwrap();
            let s: f64 = d.probs.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-9);
        }
    }
}
