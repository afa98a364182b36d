//! Okapi BM25 retrieval over an in-memory inverted index, plus the rank
//! metrics (Success Rate@k, MRR) used to judge rewrites by their downstream
//! search behavior.
//!
//! Scoring uses k1 = 1.2, b = 0.75 and the non-negative idf variant
//! ln((N - df + 0.5) / (df + 0.5) + 1). Documents sharing no term with the
//! query are never ranked, and ties are broken by ascending doc id so that
//! results are deterministic.

use std::collections::HashMap;

use thiserror::Error;

use crate::corpus::{Document, Qrels};
use crate::metrics::tokenize;

const K1: f64 = 1.2;
const B: f64 = 0.75;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RetrievalError {
    #[error("empty document collection")]
    EmptyCollection,
    #[error("duplicate doc id \"{0}\"")]
    DuplicateDocId(String),
    #[error("empty input")]
    EmptyInput,
}

/// Inverted index over a document collection. Postings keep the document
/// insertion order, which makes score accumulation deterministic.
#[derive(Debug, Clone)]
pub struct Index {
    postings: HashMap<String, Vec<(String, u32)>>,
    doc_lengths: HashMap<String, usize>,
    avg_doc_length: f64,
    doc_count: usize,
}

impl Index {
    pub fn doc_count(&self) -> usize {
        self.doc_count
    }

    pub fn avg_doc_length(&self) -> f64 {
        self.avg_doc_length
    }

    /// Number of documents containing the term (its document frequency).
    pub fn doc_frequency(&self, term: &str) -> usize {
        self.postings.get(term).map_or(0, Vec::len)
    }

    /// Token count of one document, if it exists.
    pub fn doc_length(&self, doc_id: &str) -> Option<usize> {
        self.doc_lengths.get(doc_id).copied()
    }
}

/// A descending-score ranking. `entries[0]` is rank 1.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedList {
    pub entries: Vec<(String, f64)>,
}

impl RankedList {
    /// 1-based rank of a document, if present.
    pub fn rank_of(&self, doc_id: &str) -> Option<usize> {
        self.entries.iter().position(|(id, _)| id == doc_id).map(|i| i + 1)
    }
}

/// Builds an index over the collection using the shared metric tokenizer.
/// A document may tokenize to nothing (it is indexed with length 0 and can
/// never match); an empty collection or duplicate doc id is an error.
pub fn build_index(documents: &[Document]) -> Result<Index, RetrievalError> {
    if documents.is_empty() {
        return Err(RetrievalError::EmptyCollection);
    }
    let mut postings: HashMap<String, Vec<(String, u32)>> = HashMap::new();
    let mut doc_lengths = HashMap::new();
    let mut total_length = 0usize;
    for doc in documents {
        let tokens = tokenize(&doc.body);
        if doc_lengths.insert(doc.doc_id.clone(), tokens.len()).is_some() {
            return Err(RetrievalError::DuplicateDocId(doc.doc_id.clone()));
        }
        total_length += tokens.len();
        let mut term_counts: HashMap<String, u32> = HashMap::new();
        for token in tokens.tokens {
            *term_counts.entry(token).or_insert(0) += 1;
        }
        // Sort per-document terms so the posting lists themselves do not
        // depend on hash iteration order.
        let mut term_counts: Vec<(String, u32)> = term_counts.into_iter().collect();
        term_counts.sort();
        for (term, tf) in term_counts {
            postings.entry(term).or_default().push((doc.doc_id.clone(), tf));
        }
    }
    Ok(Index {
        postings,
        avg_doc_length: total_length as f64 / documents.len() as f64,
        doc_count: documents.len(),
        doc_lengths,
    })
}

/// Scores the query against the index and returns at most k documents with a
/// positive term overlap, sorted by descending score, then ascending doc id.
/// Repeated query terms count once.
pub fn search(index: &Index, query: &str, k: usize) -> RankedList {
    let mut seen_terms = Vec::new();
    for term in tokenize(query).tokens {
        if !seen_terms.contains(&term) {
            seen_terms.push(term);
        }
    }
    let n = index.doc_count as f64;
    let mut scores: HashMap<&str, f64> = HashMap::new();
    let mut order: Vec<&str> = Vec::new();
    for term in &seen_terms {
        let Some(posting) = index.postings.get(term) else {
            continue;
        };
        let df = posting.len() as f64;
        let idf = ((n - df + 0.5) / (df + 0.5) + 1.0).ln();
        for (doc_id, tf) in posting {
            let doc_len = index.doc_lengths[doc_id] as f64;
            let tf = *tf as f64;
            let tf_norm =
                tf * (K1 + 1.0) / (tf + K1 * (1.0 - B + B * doc_len / index.avg_doc_length));
            match scores.get_mut(doc_id.as_str()) {
                Some(score) => *score += idf * tf_norm,
                None => {
                    scores.insert(doc_id, idf * tf_norm);
                    order.push(doc_id);
                }
            }
        }
    }
    let mut entries: Vec<(String, f64)> = order
        .into_iter()
        .map(|doc_id| (doc_id.to_string(), scores[doc_id]))
        .collect();
    entries.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .expect("BM25 scores are finite")
            .then_with(|| a.0.cmp(&b.0))
    });
    entries.truncate(k);
    RankedList { entries }
}

/// 1 if any of the top-k entries is relevant (grade >= 1) for the instance,
/// else 0. Instances without judgments always score 0.
pub fn success_at_k(ranked: &RankedList, qrels: &Qrels, instance_key: &str, k: usize) -> u8 {
    let hit = ranked
        .entries
        .iter()
        .take(k)
        .any(|(doc_id, _)| qrels.is_relevant(instance_key, doc_id));
    u8::from(hit)
}

/// Reciprocal of the rank of the first relevant document in the list, or 0
/// if none of the ranked documents is relevant.
pub fn reciprocal_rank(ranked: &RankedList, qrels: &Qrels, instance_key: &str) -> f64 {
    ranked
        .entries
        .iter()
        .position(|(doc_id, _)| qrels.is_relevant(instance_key, doc_id))
        .map_or(0.0, |i| 1.0 / (i as f64 + 1.0))
}

/// Mean reciprocal rank over `(instance_key, ranking)` pairs. Instances with
/// no relevant document in their ranking (including unjudged ones) contribute
/// 0. An empty input is an error.
pub fn mrr(rankings: &[(String, RankedList)], qrels: &Qrels) -> Result<f64, RetrievalError> {
    if rankings.is_empty() {
        return Err(RetrievalError::EmptyInput);
    }
    let total: f64 = rankings
        .iter()
        .map(|(key, ranked)| reciprocal_rank(ranked, qrels, key))
        .sum();
    Ok(total / rankings.len() as f64)
}
