//! Independent oracles and process helpers shared by the integration tests.
//!
//! The metric and retrieval oracles here are deliberately written from the
//! documented formulas with naive data structures (joined-string n-grams,
//! linear scans, a full quadratic LCS table, per-document term counting) so
//! they share no code or shape with the library implementations they check.

// Each test target compiles this module separately and uses its own subset.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, Output};

pub fn oracle_tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_string())
        .collect()
}

fn joined_ngrams(tokens: &[String], n: usize) -> Vec<String> {
    if tokens.len() < n {
        return Vec::new();
    }
    (0..=tokens.len() - n)
        .map(|i| tokens[i..i + n].join("\u{1}"))
        .collect()
}

/// Sentence BLEU-4 with the add-half smoothing contract: unigram precision
/// is unsmoothed (zero matches mean a zero score), higher-order zero counts
/// become 0.5/total, impossible orders contribute a flat 0.5, and the
/// brevity penalty is exp(1 - r/c) for short candidates.
pub fn oracle_bleu4(candidate: &str, reference: &str) -> f64 {
    let cand = oracle_tokenize(candidate);
    let refr = oracle_tokenize(reference);
    assert!(!refr.is_empty(), "oracle requires a non-empty reference");
    if cand.is_empty() {
        return 0.0;
    }
    let mut log_precision_sum = 0.0;
    for n in 1..=4 {
        let cand_grams = joined_ngrams(&cand, n);
        let ref_grams = joined_ngrams(&refr, n);
        let total = cand_grams.len();
        let precision = if total == 0 {
            0.5
        } else {
            let mut matched = 0usize;
            let mut seen: Vec<&String> = Vec::new();
            for gram in &cand_grams {
                if seen.contains(&gram) {
                    continue;
                }
                seen.push(gram);
                let in_candidate = cand_grams.iter().filter(|g| *g == gram).count();
                let in_reference = ref_grams.iter().filter(|g| *g == gram).count();
                matched += in_candidate.min(in_reference);
            }
            if matched == 0 {
                if n == 1 {
                    return 0.0;
                }
                0.5 / total as f64
            } else {
                matched as f64 / total as f64
            }
        };
        log_precision_sum += 0.25 * precision.ln();
    }
    let c = cand.len() as f64;
    let r = refr.len() as f64;
    let brevity = if c < r { (1.0 - r / c).exp() } else { 1.0 };
    brevity * log_precision_sum.exp()
}

/// ROUGE-L F1 from a full (|c|+1) x (|r|+1) LCS table.
pub fn oracle_rouge_l(candidate: &str, reference: &str) -> f64 {
    let cand = oracle_tokenize(candidate);
    let refr = oracle_tokenize(reference);
    assert!(!refr.is_empty(), "oracle requires a non-empty reference");
    if cand.is_empty() {
        return 0.0;
    }
    let mut table = vec![vec![0usize; refr.len() + 1]; cand.len() + 1];
    for i in 1..=cand.len() {
        for j in 1..=refr.len() {
            table[i][j] = if cand[i - 1] == refr[j - 1] {
                table[i - 1][j - 1] + 1
            } else {
                table[i - 1][j].max(table[i][j - 1])
            };
        }
    }
    let lcs = table[cand.len()][refr.len()] as f64;
    if lcs == 0.0 {
        return 0.0;
    }
    let precision = lcs / cand.len() as f64;
    let recall = lcs / refr.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Okapi BM25 (k1 = 1.2, b = 0.75) computed per document by direct scans.
/// Repeated query terms count once; documents with no term overlap are
/// excluded; ties break on ascending doc id.
pub fn oracle_bm25(documents: &[(String, String)], query: &str, k: usize) -> Vec<(String, f64)> {
    let tokenized: Vec<(String, Vec<String>)> = documents
        .iter()
        .map(|(id, body)| (id.clone(), oracle_tokenize(body)))
        .collect();
    let n = tokenized.len() as f64;
    let average_length =
        tokenized.iter().map(|(_, t)| t.len()).sum::<usize>() as f64 / n;
    let mut terms: Vec<String> = Vec::new();
    for term in oracle_tokenize(query) {
        if !terms.contains(&term) {
            terms.push(term);
        }
    }
    let mut scored: Vec<(String, f64)> = Vec::new();
    for (doc_id, tokens) in &tokenized {
        let mut score = 0.0;
        let mut overlaps = false;
        for term in &terms {
            let tf = tokens.iter().filter(|t| *t == term).count() as f64;
            if tf == 0.0 {
                continue;
            }
            overlaps = true;
            let df = tokenized
                .iter()
                .filter(|(_, ts)| ts.contains(term))
                .count() as f64;
            let idf = ((n - df + 0.5) / (df + 0.5) + 1.0).ln();
            let length_norm = 1.2 * (1.0 - 0.75 + 0.75 * tokens.len() as f64 / average_length);
            score += idf * (tf * 2.2) / (tf + length_norm);
        }
        if overlaps {
            scored.push((doc_id.clone(), score));
        }
    }
    scored.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .expect("finite scores")
            .then_with(|| a.0.cmp(&b.0))
    });
    scored.truncate(k);
    scored
}

/// Small deterministic generator so random-sequence criteria need no RNG
/// dependency (xorshift64*).
pub struct TinyRng(u64);

impl TinyRng {
    pub fn new(seed: u64) -> TinyRng {
        TinyRng(seed.max(1))
    }

    pub fn next_u64(&mut self) -> u64 {
        let mut x = self.0;
        x ^= x >> 12;
        x ^= x << 25;
        x ^= x >> 27;
        self.0 = x;
        x.wrapping_mul(0x2545_F491_4F6C_DD1D)
    }

    pub fn below(&mut self, bound: usize) -> usize {
        (self.next_u64() % bound as u64) as usize
    }
}

/// Runs the compiled `cqr` binary with the given arguments.
pub fn cqr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cqr"))
        .args(args)
        .output()
        .expect("running the cqr binary")
}

pub fn fixture(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../fixtures")
        .join(name)
        .canonicalize()
        .unwrap_or_else(|e| panic!("fixture {name}: {e}"))
        .to_string_lossy()
        .into_owned()
}

/// Reads every file under a directory into a path -> bytes map, with paths
/// relative to the root, for byte-level tree comparison.
pub fn read_tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).expect("reading output directory") {
            let path = entry.expect("directory entry").path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let relative = path
                    .strip_prefix(root)
                    .expect("path under root")
                    .to_string_lossy()
                    .into_owned();
                files.insert(relative, std::fs::read(&path).expect("reading output file"));
            }
        }
    }
    files
}
