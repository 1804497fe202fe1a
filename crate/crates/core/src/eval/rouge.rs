use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RougeScore {
    pub precision: f64,
    pub recall: f64,
    pub f: f64,
}

/// Longest common subsequence length by dynamic programming, O(|a||b|) time
/// and O(|b|) space.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L with the balanced F-measure. Empty inputs score zero.
pub fn rouge_l<T: PartialEq>(candidate: &[T], reference: &[T]) -> RougeScore {
    if candidate.is_empty() || reference.is_empty() {
        return RougeScore::default();
    }
    let lcs = lcs_len(candidate, reference) as f64;
    let precision = lcs / candidate.len() as f64;
    let recall = lcs / reference.len() as f64;
    let f = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    RougeScore {
        precision,
        recall,
        f,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testkit::brute_force_lcs;
    use proptest::prelude::*;

    #[test]
    fn identical_strings_score_one() {
        let s = rouge_l(b"hello", b"hello");
        assert_eq!((s.precision, s.recall, s.f), (1.0, 1.0, 1.0));
    }

    #[test]
    fn token_level_example() {
        let s = rouge_l(&["a", "c"], &["a", "b", "c"]);
        assert_eq!(lcs_len(&["a", "c"], &["a", "b", "c"]), 2);
        assert!((s.recall - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(s.precision, 1.0);
        assert!((s.f - 0.8).abs() < 1e-15);
    }

    #[test]
    fn empty_candidate_scores_zero() {
        assert_eq!(rouge_l(b"", b"abc"), RougeScore::default());
        assert_eq!(rouge_l(b"abc", b""), RougeScore::default());
        assert_eq!(rouge_l(b"abc", b"xyz").f, 0.0);
    }

    proptest! {
        #[test]
        fn dp_matches_brute_force(
            a in proptest::collection::vec(0u8..4, 0..=12),
            b in proptest::collection::vec(0u8..4, 0..=12),
        ) {
            prop_assert_eq!(lcs_len(&a, &b), brute_force_lcs(&a, &b));
            let s = rouge_l(&a, &b);
            prop_assert!((0.0..=1.0).contains(&s.f));
        }
    }
}
