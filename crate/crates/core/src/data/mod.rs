//! Instruction data: byte-level vocabulary, synthetic tasks, JSONL ingestion,
//! encoding with response masks, and seeded splits.

mod jsonl;
mod synthetic;

pub use jsonl::load_jsonl;
pub use synthetic::{gen_mixture, gen_synthetic, gen_synthetic_with, SyntheticConfig, Task};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeededRng;

pub const BOS: usize = 256;
pub const EOS: usize = 257;
pub const PAD: usize = 258;
pub const SEP: usize = 259;
/// 256 byte values plus BOS, EOS, PAD and SEP.
pub const VOCAB_SIZE: usize = 260;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionPair {
    pub request: Vec<u8>,
    pub response: Vec<u8>,
}

impl InstructionPair {
    pub fn new(request: impl Into<Vec<u8>>, response: impl Into<Vec<u8>>) -> Self {
        Self {
            request: request.into(),
            response: response.into(),
        }
    }
}

/// `[BOS, request.., SEP, response.., EOS]` with the response span and EOS
/// flagged.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedExample {
    pub tokens: Vec<usize>,
    pub response_mask: Vec<bool>,
}

/// Next-token training view of a sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LmView {
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    /// Set where the target belongs to the response span.
    pub loss_mask: Vec<bool>,
}

impl EncodedExample {
    /// Builds an example from a prompt (ending in SEP) and a response token
    /// sequence, which may end in EOS.
    pub fn from_prompt_and_response(prompt: &[usize], response: &[usize]) -> Self {
        let mut tokens = prompt.to_vec();
        tokens.extend_from_slice(response);
        let mut response_mask = vec![false; prompt.len()];
        response_mask.extend(std::iter::repeat_n(true, response.len()));
        Self {
            tokens,
            response_mask,
        }
    }

    /// Index of the first response position.
    pub fn response_start(&self) -> usize {
        self.response_mask
            .iter()
            .position(|&m| m)
            .unwrap_or(self.tokens.len())
    }

    /// Everything up to and including SEP.
    pub fn prompt(&self) -> &[usize] {
        &self.tokens[..self.response_start()]
    }

    pub fn request_bytes(&self) -> Vec<u8> {
        decode_bytes(self.prompt())
    }

    pub fn response_bytes(&self) -> Vec<u8> {
        decode_bytes(&self.tokens[self.response_start()..])
    }

    pub fn lm_view(&self) -> LmView {
        let n = self.tokens.len();
        LmView {
            inputs: self.tokens[..n - 1].to_vec(),
            targets: self.tokens[1..].to_vec(),
            loss_mask: self.response_mask[1..].to_vec(),
        }
    }
}

/// Byte tokens of `tokens`, specials dropped.
pub fn decode_bytes(tokens: &[usize]) -> Vec<u8> {
    tokens.iter().filter(|&&t| t < 256).map(|&t| t as u8).collect()
}

/// Response bytes of a generated continuation: stops at the first EOS.
pub fn decode_response(generated: &[usize]) -> Vec<u8> {
    let end = generated.iter().position(|&t| t == EOS).unwrap_or(generated.len());
    decode_bytes(&generated[..end])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodeLimits {
    pub max_seq_len: usize,
    pub max_request_len: usize,
}

impl EncodeLimits {
    /// Longest response that still fits next to a request of `request_len`.
    pub fn response_budget(&self, request_len: usize) -> usize {
        self.max_seq_len.saturating_sub(request_len.min(self.max_request_len) + 3)
    }
}

/// Encodes a pair, truncating the request to `max_request_len` first and then
/// the response to fit `max_seq_len`.
pub fn encode(pair: &InstructionPair, limits: EncodeLimits) -> Result<EncodedExample> {
    if pair.request.is_empty() {
        return Err(Error::contract("empty request"));
    }
    let request = &pair.request[..pair.request.len().min(limits.max_request_len)];
    let budget = limits.response_budget(request.len());
    let response = &pair.response[..pair.response.len().min(budget)];
    if response.is_empty() {
        return Err(Error::contract(format!(
            "response empty after truncation (request {} bytes, max_seq_len {})",
            request.len(),
            limits.max_seq_len
        )));
    }
    let mut tokens = Vec::with_capacity(request.len() + response.len() + 3);
    tokens.push(BOS);
    tokens.extend(request.iter().map(|&b| b as usize));
    tokens.push(SEP);
    let prompt_len = tokens.len();
    tokens.extend(response.iter().map(|&b| b as usize));
    tokens.push(EOS);
    let response_mask = (0..tokens.len()).map(|i| i >= prompt_len).collect();
    Ok(EncodedExample {
        tokens,
        response_mask,
    })
}

/// Prompt tokens `[BOS, request.., SEP]` with the request truncated.
pub fn encode_prompt(request: &[u8], limits: EncodeLimits) -> Vec<usize> {
    let request = &request[..request.len().min(limits.max_request_len)];
    let mut tokens = Vec::with_capacity(request.len() + 2);
    tokens.push(BOS);
    tokens.extend(request.iter().map(|&b| b as usize));
    tokens.push(SEP);
    tokens
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split<T> {
    pub train: Vec<T>,
    pub valid: Vec<T>,
    pub test: Vec<T>,
}

/// Seeded shuffle followed by a 14000:500:500 proportional split.
pub fn split_corpus<T: Clone>(items: &[T], rng: &mut SeededRng) -> Split<T> {
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(rng);
    let n = items.len();
    let held = ((n as f64) * 500.0 / 15000.0).round() as usize;
    let held = if n >= 3 { held.max(1) } else { 0 };
    let pick = |range: std::ops::Range<usize>| -> Vec<T> {
        order[range].iter().map(|&i| items[i].clone()).collect()
    };
    Split {
        valid: pick(0..held),
        test: pick(held..2 * held),
        train: pick(2 * held..n),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};

    const LIMITS: EncodeLimits = EncodeLimits {
        max_seq_len: 16,
        max_request_len: 6,
    };

    #[test]
    fn encodes_with_response_mask() {
        let e = encode(&InstructionPair::new("ab", "c"), LIMITS).unwrap();
        let (a, b, c) = (b'a' as usize, b'b' as usize, b'c' as usize);
        assert_eq!(e.tokens, vec![BOS, a, b, SEP, c, EOS]);
        assert_eq!(e.response_mask, vec![false, false, false, false, true, true]);
        assert_eq!(e.request_bytes(), b"ab");
        assert_eq!(e.response_bytes(), b"c");
    }

    #[test]
    fn request_truncated_before_response() {
        let pair = InstructionPair::new("abcdefghij", "xyz");
        let e = encode(&pair, LIMITS).unwrap();
        assert_eq!(e.request_bytes(), b"abcdef");
        assert_eq!(e.response_bytes(), b"xyz");

        let tight = EncodeLimits {
            max_seq_len: 10,
            max_request_len: 6,
        };
        let e = encode(&InstructionPair::new("abcdefghij", "uvwxyz"), tight).unwrap();
        assert_eq!(e.request_bytes(), b"abcdef");
        assert_eq!(e.response_bytes(), b"u");
        assert_eq!(e.tokens.len(), 10);
    }

    #[test]
    fn empty_response_after_truncation_is_an_error() {
        let tight = EncodeLimits {
            max_seq_len: 9,
            max_request_len: 6,
        };
        assert!(encode(&InstructionPair::new("abcdef", "z"), tight).is_err());
        assert!(encode(&InstructionPair::new("a", ""), LIMITS).is_err());
    }

    #[test]
    fn lm_view_masks_only_response_targets() {
        let e = encode(&InstructionPair::new("ab", "cd"), LIMITS).unwrap();
        let v = e.lm_view();
        assert_eq!(v.inputs.len(), v.targets.len());
        assert_eq!(v.loss_mask, vec![false, false, false, true, true, true]);
        assert_eq!(v.targets[5], EOS);
    }

    #[test]
    fn split_is_seeded_and_proportional() {
        let items: Vec<usize> = (0..600).collect();
        let a = split_corpus(&items, &mut stream(3, Stream::Data));
        let b = split_corpus(&items, &mut stream(3, Stream::Data));
        assert_eq!(a, b);
        assert_eq!((a.train.len(), a.valid.len(), a.test.len()), (560, 20, 20));
        let mut all: Vec<usize> = a.train.iter().chain(&a.valid).chain(&a.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, items);
    }

    #[test]
    fn mask_never_overlaps_request() {
        let pairs = gen_synthetic(Task::Reverse, 50, &mut stream(1, Stream::Data));
        for p in pairs {
            let e = encode(&p, LIMITS).unwrap();
            let start = e.response_start();
            assert!(e.tokens[..start].iter().all(|&t| t != EOS));
            assert!(e.response_mask[..start].iter().all(|&m| !m));
            assert_eq!(e.tokens[start - 1], SEP);
        }
    }
}
