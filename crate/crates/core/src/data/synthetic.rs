use rand::Rng;
use serde::{Deserialize, Serialize};

use super::InstructionPair;
use crate::error::{Error, Result};
use crate::rng::SeededRng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Copy,
    Reverse,
    SortBytes,
    CharArith,
}

impl Task {
    pub const ALL: [Task; 4] = [Task::Copy, Task::Reverse, Task::SortBytes, Task::CharArith];

    /// Request prefix byte distinguishing tasks inside a mixture.
    pub fn marker(self) -> u8 {
        match self {
            Task::Copy => b'C',
            Task::Reverse => b'R',
            Task::SortBytes => b'S',
            Task::CharArith => b'A',
        }
    }

    /// Ground-truth response for a request payload.
    pub fn solve(self, payload: &[u8]) -> Vec<u8> {
        match self {
            Task::Copy => payload.to_vec(),
            Task::Reverse => payload.iter().rev().copied().collect(),
            Task::SortBytes => {
                let mut v = payload.to_vec();
                v.sort_unstable();
                v
            }
            Task::CharArith => {
                let text = String::from_utf8_lossy(payload);
                let sum: u64 = text
                    .split('+')
                    .map(|t| t.trim().parse::<u64>().unwrap_or(0))
                    .sum();
                sum.to_string().into_bytes()
            }
        }
    }
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(Task::Copy),
            "reverse" => Ok(Task::Reverse),
            "sort_bytes" => Ok(Task::SortBytes),
            "char_arith" => Ok(Task::CharArith),
            other => Err(Error::contract(format!("unknown synthetic task {other:?}"))),
        }
    }
}

/// Payload shape for the string tasks.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub min_len: usize,
    pub max_len: usize,
    pub alphabet: String,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            min_len: 1,
            max_len: 6,
            alphabet: "abcdefgh".into(),
        }
    }
}

fn payload(task: Task, cfg: &SyntheticConfig, rng: &mut SeededRng) -> Vec<u8> {
    match task {
        Task::CharArith => {
            let (a, b) = (rng.random_range(0..10u32), rng.random_range(0..10u32));
            format!("{a}+{b}").into_bytes()
        }
        _ => {
            let alphabet = cfg.alphabet.as_bytes();
            let len = rng.random_range(cfg.min_len..=cfg.max_len);
            (0..len)
                .map(|_| alphabet[rng.random_range(0..alphabet.len())])
                .collect()
        }
    }
}

/// `n` untagged examples of one task with the default payload shape.
pub fn gen_synthetic(task: Task, n: usize, rng: &mut SeededRng) -> Vec<InstructionPair> {
    gen_synthetic_with(task, n, &SyntheticConfig::default(), rng)
}

pub fn gen_synthetic_with(
    task: Task,
    n: usize,
    cfg: &SyntheticConfig,
    rng: &mut SeededRng,
) -> Vec<InstructionPair> {
    (0..n)
        .map(|_| {
            let p = payload(task, cfg, rng);
            InstructionPair::new(p.clone(), task.solve(&p))
        })
        .collect()
}

/// `n` examples drawn uniformly across `tasks`, each request prefixed with its
/// task marker so the mixture is unambiguous.
pub fn gen_mixture(
    tasks: &[Task],
    n: usize,
    cfg: &SyntheticConfig,
    rng: &mut SeededRng,
) -> Result<Vec<InstructionPair>> {
    if tasks.is_empty() {
        return Err(Error::contract("mixture over no tasks"));
    }
    if cfg.min_len == 0 || cfg.min_len > cfg.max_len || cfg.alphabet.is_empty() {
        return Err(Error::contract(format!("invalid synthetic config {cfg:?}")));
    }
    Ok((0..n)
        .map(|_| {
            let task = tasks[rng.random_range(0..tasks.len())];
            let p = payload(task, cfg, rng);
            let mut request = vec![task.marker()];
            request.extend_from_slice(&p);
            InstructionPair::new(request, task.solve(&p))
        })
        .collect())
}
