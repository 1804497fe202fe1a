//! Independent oracles used by the test suites: central finite differences
//! for gradients and exhaustive subsequence search for LCS.

use crate::diffcore::{Graph, Tensor, Var};
use crate::error::Result;

/// Outcome of one finite-difference comparison.
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    /// Largest norm-wise relative error over all inputs.
    pub max_rel_err: f64,
}

/// Compares the analytic gradient of the scalar built by `f` against central
/// differences with the given `step`, one input tensor at a time.
///
/// Relative error per input is `|a - n| / max(|a|, |n|, floor)` in the
/// Euclidean norm, with `floor = 1e-8` guarding all-zero gradients.
pub fn check_gradients<F>(inputs: &[Tensor], step: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| g.leaf(t.clone().with_grad()))
        .collect();
    let loss = f(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| {
            g.grad(v)
                .map(|s| s.to_vec())
                .unwrap_or_else(|| vec![0.0; g.value(v).len()])
        })
        .collect();

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.data(out)[0])
    };

    let mut worst: f64 = 0.0;
    for (which, input) in inputs.iter().enumerate() {
        let mut numeric = vec![0.0; input.len()];
        for j in 0..input.len() {
            if !input.data()[j].is_finite() {
                continue;
            }
            let mut work = inputs.to_vec();
            work[which].data_mut()[j] += step;
            let up = eval(&work)?;
            work[which].data_mut()[j] -= 2.0 * step;
            let down = eval(&work)?;
            numeric[j] = (up - down) / (2.0 * step);
        }
        worst = worst.max(relative_error(&analytic[which], &numeric));
    }
    Ok(GradCheck { max_rel_err: worst })
}

pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(a).max(norm(b)).max(1e-8)
}

/// LCS length by enumerating every subsequence of the shorter input.
/// Exponential; intended for inputs of at most ~16 items.
pub fn brute_force_lcs<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let (short, long) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    assert!(short.len() <= 20, "brute force LCS limited to short inputs");
    let mut best = 0;
    for bits in 0u32..(1u32 << short.len()) {
        let size = bits.count_ones() as usize;
        if size <= best {
            continue;
        }
        let picked = short
            .iter()
            .enumerate()
            .filter(|(i, _)| bits & (1 << i) != 0)
            .map(|(_, x)| x);
        if is_subsequence(picked, long) {
            best = size;
        }
    }
    best
}

fn is_subsequence<'a, T: PartialEq + 'a>(mut needle: impl Iterator<Item = &'a T>, hay: &[T]) -> bool {
    let mut want = needle.next();
    for x in hay {
        match want {
            Some(w) if w == x => want = needle.next(),
            Some(_) => {}
            None => break,
        }
    }
    want.is_none()
}

/// Direct summation `sum_v p (ln p - ln q)` with `0 ln 0 = 0`.
pub fn kl_by_summation(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi.ln() - qi.ln()))
        .sum()
}
