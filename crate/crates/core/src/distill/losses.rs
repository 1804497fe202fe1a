use crate::diffcore::kl_row;
use crate::error::{Error, Result};
use crate::model::TokenDistribution;
use crate::moe::{load_balance_loss, ExpertLoad};

fn masked_mean_kl(
    a: &[TokenDistribution],
    b: &[TokenDistribution],
    mask: &[bool],
) -> Result<f64> {
    if a.len() != b.len() || a.len() != mask.len() {
        return Err(Error::contract(format!(
            "KL over {} and {} positions with {} mask flags",
            a.len(),
            b.len(),
            mask.len()
        )));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for ((x, y), _) in a.iter().zip(b).zip(mask).filter(|(_, &m)| m) {
        if x.vocab() != y.vocab() {
            return Err(Error::contract(format!(
                "KL between vocabularies of {} and {}",
                x.vocab(),
                y.vocab()
            )));
        }
        total += kl_row(&x.log_probs, &y.log_probs);
        count += 1;
    }
    if count == 0 {
        return Err(Error::contract("KL over an empty response mask"));
    }
    Ok(total / count as f64)
}

/// Mean over masked positions of `sum_v p (log p - log q)`.
pub fn forward_kl(p: &[TokenDistribution], q: &[TokenDistribution], mask: &[bool]) -> Result<f64> {
    masked_mean_kl(p, q, mask)
}

/// Mean over masked positions of `sum_v q (log q - log p)`. Arguments come
/// in the same (teacher, student) order as [`forward_kl`].
pub fn reverse_kl(p: &[TokenDistribution], q: &[TokenDistribution], mask: &[bool]) -> Result<f64> {
    masked_mean_kl(q, p, mask)
}

/// Router objective: `KL(p || q) + beta * sum of the layers' balancing losses`.
pub fn sar_loss(
    teacher_all: &[TokenDistribution],
    student: &[TokenDistribution],
    mask: &[bool],
    loads: &[ExpertLoad],
    beta: f64,
) -> Result<f64> {
    let kl = forward_kl(teacher_all, student, mask)?;
    let mut lb = 0.0;
    for load in loads {
        lb += load_balance_loss(load)?;
    }
    Ok(kl + beta * lb)
}
