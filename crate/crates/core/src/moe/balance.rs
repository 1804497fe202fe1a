use crate::diffcore::{Graph, Var};
use crate::error::{Error, Result};

/// Mean floor in the coefficient of variation; keeps a degenerate batch from
/// producing 0/0.
pub const CV_MEAN_FLOOR: f64 = 1e-10;

/// Per-expert token counts `m` and summed gate probabilities `P` for a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpertLoad {
    pub counts: Vec<usize>,
    pub prob_mass: Vec<f64>,
}

impl ExpertLoad {
    pub fn new(counts: Vec<usize>, prob_mass: Vec<f64>) -> Result<Self> {
        if counts.len() != prob_mass.len() {
            return Err(Error::shape(
                "expert_load",
                format!("{} counts vs {} masses", counts.len(), prob_mass.len()),
            ));
        }
        Ok(Self { counts, prob_mass })
    }

    /// Accumulates counts and probability mass from per-token probabilities.
    pub fn from_probs<'a>(n: usize, probs: impl IntoIterator<Item = &'a [f64]>) -> Self {
        let mut counts = vec![0; n];
        let mut mass = vec![0.0; n];
        for row in probs {
            for (i, &p) in row.iter().enumerate() {
                if p > 0.0 {
                    counts[i] += 1;
                }
                mass[i] += p;
            }
        }
        Self {
            counts,
            prob_mass: mass,
        }
    }

    pub fn total_assignments(&self) -> usize {
        self.counts.iter().sum()
    }
}

/// Squared coefficient of variation with population variance.
pub fn cv_squared(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    var / mean.max(CV_MEAN_FLOOR).powi(2)
}

/// `CV(m)^2 + CV(P)^2`.
pub fn load_balance_loss(load: &ExpertLoad) -> Result<f64> {
    if load.total_assignments() == 0 {
        return Err(Error::contract("load balancing loss over zero routed tokens"));
    }
    let m: Vec<f64> = load.counts.iter().map(|&c| c as f64).collect();
    Ok(cv_squared(&m) + cv_squared(&load.prob_mass))
}

/// Graph form of [`load_balance_loss`] for gate probabilities `probs: [tokens, N]`.
///
/// The count term is a constant; only the probability-mass term carries
/// gradient.
pub fn load_balance_loss_var(g: &mut Graph, probs: Var, counts: &[usize]) -> Result<Var> {
    if counts.iter().sum::<usize>() == 0 {
        return Err(Error::contract("load balancing loss over zero routed tokens"));
    }
    let n = counts.len();
    if g.value(probs).cols() != n {
        return Err(Error::shape(
            "load_balance_loss",
            format!("{:?} probs vs {n} experts", g.shape(probs)),
        ));
    }
    let m: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
    let count_term = cv_squared(&m);

    let mass = g.sum_rows(probs)?;
    let mean = g.mean(mass);
    let centered = {
        let spread = g.expand(mean, &[n])?;
        g.sub(mass, spread)?
    };
    let sq = g.mul(centered, centered)?;
    let var = g.mean(sq);
    let denom = if g.data(mean)[0] >= CV_MEAN_FLOOR {
        g.mul(mean, mean)?
    } else {
        g.constant(crate::Tensor::scalar(CV_MEAN_FLOOR * CV_MEAN_FLOOR))
    };
    let cv2 = g.div(var, denom)?;
    Ok(g.shift(cv2, count_term))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testkit::check_gradients;
    use crate::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn uniform_load_is_exactly_zero() {
        let load = ExpertLoad::new(vec![4, 4, 4], vec![1.5, 1.5, 1.5]).unwrap();
        assert_eq!(load_balance_loss(&load).unwrap(), 0.0);
    }

    #[test]
    fn hand_computed_load() {
        let load = ExpertLoad::new(vec![1, 3], vec![0.5, 0.5]).unwrap();
        assert!((load_balance_loss(&load).unwrap() - 0.25).abs() <= 1e-12);
    }

    #[test]
    fn zero_tokens_is_a_contract_error() {
        let load = ExpertLoad::new(vec![0, 0], vec![0.0, 0.0]).unwrap();
        assert!(matches!(load_balance_loss(&load), Err(Error::Contract(_))));
    }

    #[test]
    fn nonnegative_on_random_loads() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..1000 {
            let n = rng.random_range(1..9);
            let mut counts: Vec<usize> = (0..n).map(|_| rng.random_range(0..20)).collect();
            counts[0] += 1;
            let mass = (0..n).map(|_| rng.random_range(0.0..5.0)).collect();
            let l = load_balance_loss(&ExpertLoad::new(counts, mass).unwrap()).unwrap();
            assert!(l >= 0.0 && l.is_finite());
        }
    }

    #[test]
    fn graph_form_matches_value_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let rows: Vec<Vec<f64>> = (0..6)
            .map(|_| {
                let v: Vec<f64> = (0..4).map(|_| rng.random_range(0.0..1.0)).collect();
                let s: f64 = v.iter().sum();
                v.into_iter().map(|x| x / s).collect()
            })
            .collect();
        let load = ExpertLoad::from_probs(4, rows.iter().map(|r| r.as_slice()));
        let expected = load_balance_loss(&load).unwrap();
        let mut g = Graph::new();
        let p = g.constant(Tensor::from_rows(&rows));
        let l = load_balance_loss_var(&mut g, p, &[6, 6, 6, 6]).unwrap();
        assert!((g.data(l)[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn probability_term_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..20 {
            let logits = Tensor::new(
                vec![5, 4],
                (0..20).map(|_| rng.random_range(-2.0..2.0)).collect(),
            )
            .unwrap();
            let check = check_gradients(&[logits], 1e-6, |g, v| {
                let p = g.softmax(v[0], 1)?;
                load_balance_loss_var(g, p, &[3, 2, 4, 1])
            })
            .unwrap();
            assert!(check.max_rel_err < 1e-4, "{check:?}");
        }
    }
}
