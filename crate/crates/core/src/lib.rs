//! Conversational query rewriting with in-context prompting.
//!
//! The library turns multi-turn conversations into standalone search queries
//! and measures how well the rewrites work. The pieces compose in a fixed
//! order:
//!
//! 1. [`corpus`] loads conversations, gold rewrites, relevance judgments, and
//!    the document collection, and expands conversations into per-turn
//!    rewrite instances.
//! 2. [`prompt`] assembles the four-part rewriting prompt (task definition,
//!    format note, in-context examples, test input) deterministically.
//! 3. [`llm`] sends prompts to a rewrite backend: an HTTP chat-completion
//!    endpoint, a deterministic offline baseline, or a replay cache.
//! 4. [`metrics`] scores rewrites against gold references (BLEU-4, ROUGE-L),
//!    while [`retrieval`] scores them by downstream search quality (BM25
//!    Success Rate@k and MRR).
//! 5. [`analysis`] aggregates per-instance scores into reports, runs shot
//!    ablations, slices by turn depth and ellipticity, and exports blinded
//!    pairwise comparisons; [`report`] renders the human-readable tables.
//!
//! Every stage is deterministic for a fixed seed and input set: repeated runs
//! produce byte-identical artifacts.

pub mod analysis;
pub mod corpus;
pub mod llm;
pub mod metrics;
pub mod prompt;
pub mod report;
pub mod retrieval;
