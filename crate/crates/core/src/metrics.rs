//! Overlap metrics between a candidate rewrite and a gold reference:
//! sentence-level BLEU-4 with add-half smoothing and ROUGE-L F1.
//!
//! Both metrics operate on [`TokenSeq`] values produced by [`tokenize`],
//! which is also the tokenizer used by the BM25 retriever, so a rewrite is
//! scored and retrieved against the exact same token stream.

use std::collections::HashMap;

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricsError {
    /// The reference side of a pair was empty after tokenization.
    #[error("empty reference")]
    EmptyReference,
    /// A corpus average was requested over zero pairs.
    #[error("empty score list")]
    EmptyScoreList,
}

/// A tokenized text: lowercased, split on non-alphanumeric characters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSeq {
    pub tokens: Vec<String>,
}

impl TokenSeq {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Lowercases the input and splits it on runs of non-alphanumeric
/// characters. Empty fragments are dropped, so any mix of punctuation and
/// whitespace acts as a single separator.
pub fn tokenize(text: &str) -> TokenSeq {
    let tokens = text
        .to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect();
    TokenSeq { tokens }
}

/// BLEU-4 score with BP and clipped n-gram precisions
/// combined as exp(sum_n 0.25 * ln p_n), n=1..4.
///
/// Smoothing follows the add-half convention for the higher orders only:
///
/// * p1 is unsmoothed. A candidate with zero unigram matches scores 0.
/// * For n >= 2, zero matches out of a positive n-gram count become
///   0.5 / count, and a candidate too short to form any n-gram gets the
///   floor value 0.5 (treated as 0.5 matches out of one possible n-gram).
///
/// The floor means a candidate shorter than four tokens cannot reach 1.0
/// even against an identical reference; identity scores are exactly 1.0
/// from four tokens upward.
///
/// Returns an error for an empty reference; an empty candidate against a
/// non-empty reference scores 0.
pub fn bleu4(candidate: &TokenSeq, reference: &TokenSeq) -> Result<f64, MetricsError> {
    if reference.is_empty() {
        return Err(MetricsError::EmptyReference);
    }
    if candidate.is_empty() {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let (matched, total) = clipped_matches(&candidate.tokens, &reference.tokens, n);
        let precision = if total == 0 {
            0.5
        } else if matched == 0 {
            if n == 1 {
                return Ok(0.0);
            }
            0.5 / total as f64
        } else {
            matched as f64 / total as f64
        };
        log_sum += 0.25 * precision.ln();
    }
    let c = candidate.len() as f64;
    let r = reference.len() as f64;
    let brevity = if c < r { (1.0 - r / c).exp() } else { 1.0 };
    Ok(brevity * log_sum.exp())
}

/// Counts candidate n-grams and how many of them match the reference, with
/// each reference n-gram usable at most as often as it occurs there.
fn clipped_matches(candidate: &[String], reference: &[String], n: usize) -> (usize, usize) {
    if candidate.len() < n {
        return (0, 0);
    }
    let mut ref_counts: HashMap<&[String], usize> = HashMap::new();
    if reference.len() >= n {
        for gram in reference.windows(n) {
            *ref_counts.entry(gram).or_insert(0) += 1;
        }
    }
    let mut cand_counts: HashMap<&[String], usize> = HashMap::new();
    for gram in candidate.windows(n) {
        *cand_counts.entry(gram).or_insert(0) += 1;
    }
    let total = candidate.len() - n + 1;
    let matched = cand_counts
        .iter()
        .map(|(gram, count)| (*count).min(ref_counts.get(gram).copied().unwrap_or(0)))
        .sum();
    (matched, total)
}

/// ROUGE-L F1: precision and recall of the longest common subsequence,
/// combined with beta = 1 as 2PR / (P + R).
///
/// Returns an error for an empty reference; an empty candidate or a pair
/// with no common subsequence scores 0.
pub fn rouge_l(candidate: &TokenSeq, reference: &TokenSeq) -> Result<f64, MetricsError> {
    if reference.is_empty() {
        return Err(MetricsError::EmptyReference);
    }
    if candidate.is_empty() {
        return Ok(0.0);
    }
    let lcs = lcs_length(&candidate.tokens, &reference.tokens) as f64;
    if lcs == 0.0 {
        return Ok(0.0);
    }
    let precision = lcs / candidate.len() as f64;
    let recall = lcs / reference.len() as f64;
    Ok(2.0 * precision * recall / (precision + recall))
}

/// Longest common subsequence length via a rolling two-row DP.
fn lcs_length(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for token_a in a {
        for (j, token_b) in b.iter().enumerate() {
            cur[j + 1] = if token_a == token_b {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// One candidate/reference pair scored under both metrics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairScore {
    pub bleu4: f64,
    pub rouge_l: f64,
}

/// Scores a single pair under both metrics.
pub fn score_pair(candidate: &TokenSeq, reference: &TokenSeq) -> Result<PairScore, MetricsError> {
    Ok(PairScore {
        bleu4: bleu4(candidate, reference)?,
        rouge_l: rouge_l(candidate, reference)?,
    })
}

/// Unweighted mean of per-pair scores. Errors on an empty list rather than
/// inventing a 0/0 value.
pub fn corpus_average(scores: &[PairScore]) -> Result<PairScore, MetricsError> {
    if scores.is_empty() {
        return Err(MetricsError::EmptyScoreList);
    }
    let n = scores.len() as f64;
    Ok(PairScore {
        bleu4: scores.iter().map(|s| s.bleu4).sum::<f64>() / n,
        rouge_l: scores.iter().map(|s| s.rouge_l).sum::<f64>() / n,
    })
}
