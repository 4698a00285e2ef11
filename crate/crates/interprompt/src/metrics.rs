//! From-scratch classification and generation-similarity metrics.
//!
//! Generation metrics (ROUGE-1, ROUGE-L, BLEU-1) operate on case-folded,
//! punctuation-stripped, whitespace-split tokens; exact match uses the
//! lighter canonical normalization (case-fold, trim, collapse whitespace).
//! ROUGE scores are reported as F1.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::canonicalize;

/// Tokenizer version tag, recorded in reports: every score depends on it.
pub const TOKENIZER_VERSION: &str = "lower-alnum-ws-v1";

/// Case-fold, replace punctuation with spaces, split on whitespace.
pub fn tokenize(s: &str) -> Vec<String> {
    s.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryConfusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl BinaryConfusion {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (bool, bool)>) -> Self {
        let mut c = BinaryConfusion::default();
        for (predicted, gold) in pairs {
            match (predicted, gold) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        c
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
    /// True when a zero-denominator convention fired (precision with no
    /// positive predictions, recall with no positive gold, or F1 with
    /// P + R = 0).
    pub degenerate: bool,
}

/// Precision, recall, F1 and accuracy with explicit zero-denominator
/// conventions. Total count must be positive.
pub fn classification_metrics(c: &BinaryConfusion) -> ClassificationMetrics {
    assert!(c.total() > 0, "empty confusion table");
    let mut degenerate = false;
    let precision = if c.tp + c.fp == 0 {
        degenerate = true;
        0.0
    } else {
        c.tp as f64 / (c.tp + c.fp) as f64
    };
    let recall = if c.tp + c.fn_ == 0 {
        degenerate = true;
        0.0
    } else {
        c.tp as f64 / (c.tp + c.fn_) as f64
    };
    let f1 = if precision + recall == 0.0 {
        degenerate = true;
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    let accuracy = (c.tp + c.tn) as f64 / c.total() as f64;
    ClassificationMetrics {
        precision,
        recall,
        f1,
        accuracy,
        degenerate,
    }
}

fn clipped_overlap(candidate: &[String], reference: &[String]) -> usize {
    use std::collections::HashMap;
    let mut ref_counts: HashMap<&str, usize> = HashMap::new();
    for t in reference {
        *ref_counts.entry(t).or_default() += 1;
    }
    let mut overlap = 0;
    for t in candidate {
        if let Some(n) = ref_counts.get_mut(t.as_str()) {
            if *n > 0 {
                *n -= 1;
                overlap += 1;
            }
        }
    }
    overlap
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut curr = vec![0usize; b.len() + 1];
    for ta in a {
        for (j, tb) in b.iter().enumerate() {
            curr[j + 1] = if ta == tb {
                prev[j] + 1
            } else {
                prev[j + 1].max(curr[j])
            };
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    prev[b.len()]
}

fn f1_from(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Unigram-overlap F1 with clipped counts.
pub fn rouge1(candidate: &str, reference: &str) -> f64 {
    let c = tokenize(candidate);
    let r = tokenize(reference);
    if c.is_empty() || r.is_empty() {
        return 0.0;
    }
    let overlap = clipped_overlap(&c, &r) as f64;
    f1_from(overlap / c.len() as f64, overlap / r.len() as f64)
}

/// LCS-based F1: precision = LCS/|candidate|, recall = LCS/|reference|.
pub fn rouge_l(candidate: &str, reference: &str) -> f64 {
    let c = tokenize(candidate);
    let r = tokenize(reference);
    if c.is_empty() || r.is_empty() {
        return 0.0;
    }
    let lcs = lcs_len(&c, &r) as f64;
    f1_from(lcs / c.len() as f64, lcs / r.len() as f64)
}

/// Sentence-level BLEU-1: clipped unigram precision times the brevity
/// penalty exp(1 - |ref|/|cand|) when the candidate is shorter.
pub fn bleu1(candidate: &str, reference: &str) -> f64 {
    let c = tokenize(candidate);
    let r = tokenize(reference);
    if c.is_empty() || r.is_empty() {
        return 0.0;
    }
    let precision = clipped_overlap(&c, &r) as f64 / c.len() as f64;
    let brevity = if c.len() < r.len() {
        (1.0 - r.len() as f64 / c.len() as f64).exp()
    } else {
        1.0
    };
    precision * brevity
}

/// 1 iff both strings are equal after canonical normalization.
pub fn exact_match(candidate: &str, reference: &str) -> f64 {
    if canonicalize(candidate) == canonicalize(reference) {
        1.0
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerationScores {
    pub rouge1: f64,
    pub rouge_l: f64,
    pub bleu1: f64,
    pub exact_match: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorpusGenerationScores {
    pub scores: GenerationScores,
    /// Pairs that entered the macro average.
    pub scored: usize,
    /// Pairs skipped for lack of a gold cue.
    pub skipped: usize,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MetricsError {
    #[error("no scorable pairs ({skipped} skipped): corpus scores undefined")]
    UndefinedScore { skipped: usize },
}

/// Macro average of per-pair scores. A pair without a gold reference is
/// skipped and counted; a missing candidate scores zero against a present
/// reference.
pub fn corpus_generation_scores(
    pairs: &[(Option<String>, Option<String>)],
) -> Result<CorpusGenerationScores, MetricsError> {
    let mut sums = GenerationScores {
        rouge1: 0.0,
        rouge_l: 0.0,
        bleu1: 0.0,
        exact_match: 0.0,
    };
    let mut scored = 0usize;
    let mut skipped = 0usize;
    for (candidate, reference) in pairs {
        let Some(reference) = reference else {
            skipped += 1;
            continue;
        };
        let candidate = candidate.as_deref().unwrap_or("");
        sums.rouge1 += rouge1(candidate, reference);
        sums.rouge_l += rouge_l(candidate, reference);
        sums.bleu1 += bleu1(candidate, reference);
        sums.exact_match += exact_match(candidate, reference);
        scored += 1;
    }
    if scored == 0 {
        return Err(MetricsError::UndefinedScore { skipped });
    }
    let n = scored as f64;
    Ok(CorpusGenerationScores {
        scores: GenerationScores {
            rouge1: sums.rouge1 / n,
            rouge_l: sums.rouge_l / n,
            bleu1: sums.bleu1 / n,
            exact_match: sums.exact_match / n,
        },
        scored,
        skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn classification_worked_example() {
        let c = BinaryConfusion {
            tp: 3,
            fp: 1,
            fn_: 1,
            tn: 5,
        };
        let m = classification_metrics(&c);
        assert_abs_diff_eq!(m.precision, 0.75);
        assert_abs_diff_eq!(m.recall, 0.75);
        assert_abs_diff_eq!(m.f1, 0.75);
        assert_abs_diff_eq!(m.accuracy, 0.8);
        assert!(!m.degenerate);
    }

    #[test]
    fn classification_all_correct() {
        let c = BinaryConfusion {
            tp: 4,
            fp: 0,
            fn_: 0,
            tn: 6,
        };
        let m = classification_metrics(&c);
        assert_eq!((m.precision, m.recall, m.f1, m.accuracy), (1.0, 1.0, 1.0, 1.0));
    }

    #[test]
    fn classification_no_positive_predictions() {
        let c = BinaryConfusion {
            tp: 0,
            fp: 0,
            fn_: 2,
            tn: 3,
        };
        let m = classification_metrics(&c);
        assert_eq!(m.precision, 0.0);
        assert!(m.degenerate);
    }

    #[test]
    fn rouge1_worked_example() {
        assert_abs_diff_eq!(rouge1("the cat sat", "the cat"), 0.8, epsilon = 1e-12);
        assert_eq!(rouge1("same words", "same words"), 1.0);
        assert_eq!(rouge1("alpha beta", "gamma delta"), 0.0);
        assert_eq!(rouge1("", "ref"), 0.0);
    }

    #[test]
    fn rouge_l_worked_example() {
        assert_abs_diff_eq!(rouge_l("a c b", "a b c"), 2.0 / 3.0, epsilon = 1e-12);
        assert_eq!(rouge_l("same words", "same words"), 1.0);
        assert_eq!(rouge_l("alpha beta", "gamma delta"), 0.0);
    }

    #[test]
    fn bleu1_clipping_and_brevity() {
        assert_abs_diff_eq!(bleu1("the the the", "the cat"), 1.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(
            bleu1("the", "the cat"),
            (-1.0f64).exp(),
            epsilon = 1e-12
        );
        assert_eq!(bleu1("same words", "same words"), 1.0);
    }

    #[test]
    fn exact_match_normalization() {
        assert_eq!(exact_match("Feel  Alone ", "feel alone"), 1.0);
        assert_eq!(exact_match("feel alone", "feels alone"), 0.0);
        assert_eq!(exact_match("", ""), 1.0);
    }

    #[test]
    fn corpus_scores_macro_average() {
        let pairs = vec![
            (Some("feel alone".to_string()), Some("feel alone".to_string())),
            (Some("xyz".to_string()), Some("feel alone".to_string())),
            (Some("ignored".to_string()), None),
        ];
        let out = corpus_generation_scores(&pairs).unwrap();
        assert_abs_diff_eq!(out.scores.rouge1, 0.5, epsilon = 1e-12);
        assert_eq!(out.scored, 2);
        assert_eq!(out.skipped, 1);
    }

    #[test]
    fn corpus_scores_empty_is_error() {
        assert!(corpus_generation_scores(&[]).is_err());
        let all_skipped = vec![(Some("x".to_string()), None)];
        assert!(matches!(
            corpus_generation_scores(&all_skipped),
            Err(MetricsError::UndefinedScore { skipped: 1 })
        ));
    }

    #[test]
    fn em_implies_all_ones() {
        for (c, r) in [("Feel Alone", "feel  alone"), ("a b c", "A B C")] {
            assert_eq!(exact_match(c, r), 1.0);
            assert_eq!(rouge1(c, r), 1.0);
            assert_eq!(rouge_l(c, r), 1.0);
            assert_eq!(bleu1(c, r), 1.0);
        }
    }

    #[test]
    fn scores_bounded_on_fuzzed_pairs() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand::rngs::StdRng::seed_from_u64(11);
        let words = ["the", "cat", "sat", "alone", "burden", "a", "b", "zz"];
        let sentence = |rng: &mut rand::rngs::StdRng| {
            let n = rng.gen_range(0..10);
            (0..n)
                .map(|_| words[rng.gen_range(0..words.len())])
                .collect::<Vec<_>>()
                .join(" ")
        };
        for _ in 0..10_000 {
            let c = sentence(&mut rng);
            let r = sentence(&mut rng);
            for score in [rouge1(&c, &r), rouge_l(&c, &r), bleu1(&c, &r), exact_match(&c, &r)] {
                assert!((0.0..=1.0).contains(&score), "{score} out of range");
            }
        }
    }
}
