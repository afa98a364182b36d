//! Four-part rewriting prompt assembly.
//!
//! A rendered prompt is the concatenation, separated by blank lines, of:
//!
//! 1. the task definition,
//! 2. a format note describing the input/output layout,
//! 3. `shot_count` worked examples (`Example 1:` ... `Example k:`), and
//! 4. the test input, ending with a bare `Rewrite:` for the model to
//!    complete.
//!
//! Histories and examples render as `User:` / `System:` lines under a
//! `History:` header; an empty history renders as `(no prior turns)` so the
//! zero-history case stays visually explicit. Rendering is pure: the same
//! spec and instance always produce the same bytes and therefore the same
//! content hash.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{CorpusError, RewriteInstance, Turn};

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("insufficient examples: requested {requested}, pool has {available}")]
    InsufficientExamples { requested: usize, available: usize },
    #[error("history budget must be >= 1")]
    ZeroHistoryBudget,
    #[error(transparent)]
    Pool(#[from] CorpusError),
}

/// Phenomenon exercised by an in-context example. Used by the
/// category-balanced selection strategy; examples without a recognized tag
/// fall into [`ExampleCategory::Unspecified`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExampleCategory {
    Coreference,
    Ellipsis,
    Carryover,
    Unspecified,
}

impl ExampleCategory {
    fn from_tag(tag: Option<&str>) -> Self {
        match tag {
            Some("coreference") => ExampleCategory::Coreference,
            Some("ellipsis") => ExampleCategory::Ellipsis,
            Some("carryover") => ExampleCategory::Carryover,
            _ => ExampleCategory::Unspecified,
        }
    }
}

/// One worked example: a (possibly empty) history, the contextual query, and
/// its standalone rewrite.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExampleTriple {
    pub history: Vec<Turn>,
    pub query: String,
    pub rewrite: String,
    pub category: ExampleCategory,
}

/// How in-context examples are drawn from the pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionStrategy {
    /// The first `shot_count` pool entries, in pool order.
    FirstK,
    /// A seeded uniform sample without replacement, in sampler order.
    SeededRandom,
    /// Rotates coreference -> ellipsis -> carryover, substituting
    /// unspecified (then any remaining) examples when a category runs dry,
    /// and reusing examples cyclically when `shot_count` exceeds the pool.
    CategoryBalanced,
}

/// Everything needed to render prompts for one experimental condition.
#[derive(Debug, Clone)]
pub struct PromptSpec {
    pub task_definition: String,
    pub format_note: String,
    pub example_pool: Vec<ExampleTriple>,
    pub shot_count: usize,
    pub selection: SelectionStrategy,
    pub seed: u64,
    /// Maximum rendered history size in characters; older turns are dropped
    /// first when the test input's history exceeds it.
    pub history_budget: usize,
}

impl PromptSpec {
    /// The default condition: built-in wording, built-in 5-example pool,
    /// 5 shots in pool order, and a budget generous enough for ordinary
    /// conversations.
    pub fn with_defaults(shot_count: usize, selection: SelectionStrategy, seed: u64) -> Self {
        PromptSpec {
            task_definition: default_task_definition().to_string(),
            format_note: default_format_note().to_string(),
            example_pool: default_example_pool(),
            shot_count,
            selection,
            seed,
            history_budget: 4000,
        }
    }
}

/// Half-open byte range `[start, end)` of one prompt section. Spans tile the
/// full text: each span includes the separator that follows its section.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SectionSpan {
    pub name: String,
    pub start: usize,
    pub end: usize,
}

/// A fully rendered prompt plus the bookkeeping the rest of the pipeline
/// needs: section spans for inspection and a content hash for caching.
#[derive(Debug, Clone)]
pub struct RenderedPrompt {
    pub text: String,
    pub section_spans: Vec<SectionSpan>,
    /// Hex SHA-256 of `text`; the cache and replay key.
    pub content_hash: String,
    /// The instance query, carried so offline backends need not re-parse the
    /// prompt text.
    pub(crate) test_query: String,
    /// The (budget-truncated) history shown in the test input.
    pub(crate) test_history: Vec<Turn>,
}

pub fn default_task_definition() -> &'static str {
    "Your task is to rewrite the user's last query into a standalone search query. \
     Consider the preceding conversation history to resolve any context dependencies \
     in the current query. The rewritten query should be understandable without \
     referring back to the conversation."
}

pub fn default_format_note() -> &'static str {
    "The input shows the conversation history as \"User:\" and \"System:\" lines under \
     a \"History:\" header, followed by the current query on a \"Query:\" line. Reply \
     with only the standalone rewritten query, on a single line, after \"Rewrite:\"."
}

/// Built-in example pool covering the three phenomenon categories. The
/// first entry is the canonical pronoun-resolution example.
pub fn default_example_pool() -> Vec<ExampleTriple> {
    let turn = |user: &str, system: &str| Turn {
        user_utterance: user.to_string(),
        system_response: Some(system.to_string()),
        gold_rewrite: None,
    };
    vec![
        ExampleTriple {
            history: vec![turn(
                "Find me information about the capital of France.",
                "The capital of France is Paris.",
            )],
            query: "What is its population?".to_string(),
            rewrite: "What is the population of Paris?".to_string(),
            category: ExampleCategory::Coreference,
        },
        ExampleTriple {
            history: vec![turn(
                "Who designed the Eiffel Tower?",
                "The Eiffel Tower was designed by Gustave Eiffel's engineering company.",
            )],
            query: "And when?".to_string(),
            rewrite: "When was the Eiffel Tower designed?".to_string(),
            category: ExampleCategory::Ellipsis,
        },
        ExampleTriple {
            history: vec![
                turn(
                    "I am planning a trip to Japan in spring.",
                    "Spring is a popular season to visit Japan, especially for cherry blossoms.",
                ),
                turn(
                    "Which cities should I visit?",
                    "Tokyo, Kyoto, and Osaka are the most popular destinations.",
                ),
            ],
            query: "How do I travel between them?".to_string(),
            rewrite: "How do I travel between Tokyo, Kyoto, and Osaka in Japan?".to_string(),
            category: ExampleCategory::Carryover,
        },
        ExampleTriple {
            history: vec![turn(
                "Tell me about blue whales.",
                "Blue whales are the largest animals known to have ever existed.",
            )],
            query: "What do they eat?".to_string(),
            rewrite: "What do blue whales eat?".to_string(),
            category: ExampleCategory::Coreference,
        },
        ExampleTriple {
            history: vec![turn(
                "How tall is Mount Everest?",
                "Mount Everest is 8,849 meters tall.",
            )],
            query: "And K2?".to_string(),
            rewrite: "How tall is the mountain K2?".to_string(),
            category: ExampleCategory::Ellipsis,
        },
    ]
}

/// Loads an example pool from a canonical conversation file: every turn that
/// carries a `rewrite` becomes one example, with the turns before it as the
/// example history and the record's `category` tag applied to all examples
/// from that record.
pub fn load_example_pool(path: &Path) -> Result<Vec<ExampleTriple>, CorpusError> {
    let mut pool = Vec::new();
    for (_, record) in crate::corpus::read_canonical_records(path)? {
        let mut history: Vec<Turn> = Vec::new();
        for turn_record in record.turns {
            let turn = Turn {
                user_utterance: turn_record.user,
                system_response: turn_record.system,
                gold_rewrite: None,
            };
            if let Some(rewrite) = turn_record.rewrite {
                if !rewrite.trim().is_empty() && !turn.user_utterance.trim().is_empty() {
                    pool.push(ExampleTriple {
                        history: history.clone(),
                        query: turn.user_utterance.clone(),
                        rewrite,
                        category: ExampleCategory::from_tag(turn_record.category.as_deref()),
                    });
                }
            }
            history.push(turn);
        }
    }
    Ok(pool)
}

/// Renders a history as alternating `User:` / `System:` lines with no
/// trailing newline. An empty history renders as the empty string; the
/// `(no prior turns)` placeholder is applied by the block renderers, not
/// here, so budget accounting sees only real content.
pub fn render_history(history: &[Turn]) -> String {
    let mut out = String::new();
    for turn in history {
        if !out.is_empty() {
            out.push('\n');
        }
        write!(out, "User: {}", turn.user_utterance).expect("string write");
        if let Some(system) = &turn.system_response {
            write!(out, "\nSystem: {system}").expect("string write");
        }
    }
    out
}

fn history_block(history: &[Turn]) -> String {
    if history.is_empty() {
        "History:\n(no prior turns)".to_string()
    } else {
        format!("History:\n{}", render_history(history))
    }
}

/// Keeps the longest suffix of the history whose rendering fits the budget
/// (counted in characters of [`render_history`] output). Dropping a turn
/// always drops the whole turn. If even the most recent turn does not fit,
/// the result is empty and a warning is logged.
pub fn truncate_history(history: &[Turn], budget: usize) -> Vec<Turn> {
    let mut used = 0usize;
    let mut start = history.len();
    for i in (0..history.len()).rev() {
        let mut turn_chars = "User: ".chars().count() + history[i].user_utterance.chars().count();
        if let Some(system) = &history[i].system_response {
            turn_chars += "\nSystem: ".chars().count() + system.chars().count();
        }
        // One newline joins this turn to the turns already kept.
        let joined = turn_chars + if start < history.len() { 1 } else { 0 };
        if used + joined > budget {
            break;
        }
        used += joined;
        start = i;
    }
    if start == history.len() && !history.is_empty() {
        log::warn!("history budget {budget} drops all {} turns", history.len());
    }
    history[start..].to_vec()
}

/// Renders one worked example block (without its `Example N:` label).
pub fn render_example(example: &ExampleTriple) -> String {
    format!(
        "{}\nQuery: {}\nRewrite: {}",
        history_block(&example.history),
        example.query,
        example.rewrite
    )
}

/// Draws `shot_count` examples from the pool according to the strategy.
/// `first_k` and `seeded_random` never repeat an example and therefore
/// reject a pool smaller than `shot_count`; `category_balanced` wraps
/// around instead and only rejects an empty pool.
pub fn select_examples(spec: &PromptSpec) -> Result<Vec<ExampleTriple>, PromptError> {
    let k = spec.shot_count;
    if k == 0 {
        return Ok(Vec::new());
    }
    let pool = &spec.example_pool;
    match spec.selection {
        SelectionStrategy::FirstK => {
            if k > pool.len() {
                return Err(PromptError::InsufficientExamples {
                    requested: k,
                    available: pool.len(),
                });
            }
            Ok(pool[..k].to_vec())
        }
        SelectionStrategy::SeededRandom => {
            if k > pool.len() {
                return Err(PromptError::InsufficientExamples {
                    requested: k,
                    available: pool.len(),
                });
            }
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            let picked = rand::seq::index::sample(&mut rng, pool.len(), k);
            Ok(picked.iter().map(|i| pool[i].clone()).collect())
        }
        SelectionStrategy::CategoryBalanced => {
            if pool.is_empty() {
                return Err(PromptError::InsufficientExamples {
                    requested: k,
                    available: 0,
                });
            }
            Ok(select_category_balanced(pool, k))
        }
    }
}

fn select_category_balanced(pool: &[ExampleTriple], k: usize) -> Vec<ExampleTriple> {
    const ROTATION: [ExampleCategory; 3] = [
        ExampleCategory::Coreference,
        ExampleCategory::Ellipsis,
        ExampleCategory::Carryover,
    ];
    let mut queues: [VecDeque<usize>; 3] = Default::default();
    let mut unspecified: VecDeque<usize> = VecDeque::new();
    for (i, example) in pool.iter().enumerate() {
        match ROTATION.iter().position(|c| *c == example.category) {
            Some(slot) => queues[slot].push_back(i),
            None => unspecified.push_back(i),
        }
    }
    let mut picked: Vec<usize> = Vec::with_capacity(k);
    for slot in 0.. {
        if picked.len() == k {
            break;
        }
        let want = slot % 3;
        let next = queues[want]
            .pop_front()
            .or_else(|| unspecified.pop_front())
            .or_else(|| (1..3).find_map(|off| queues[(want + off) % 3].pop_front()));
        match next {
            Some(i) => picked.push(i),
            None => break,
        }
    }
    // Pool exhausted before k examples: reuse the picked sequence in order.
    let base_len = picked.len();
    while picked.len() < k {
        let next = picked[picked.len() % base_len];
        picked.push(next);
    }
    picked.into_iter().map(|i| pool[i].clone()).collect()
}

/// Renders the full prompt for one instance.
pub fn build_prompt(
    spec: &PromptSpec,
    instance: &RewriteInstance,
) -> Result<RenderedPrompt, PromptError> {
    if spec.history_budget == 0 {
        return Err(PromptError::ZeroHistoryBudget);
    }
    let examples = select_examples(spec)?;
    let history = truncate_history(&instance.history, spec.history_budget);
    let test_block = format!(
        "{}\nQuery: {}\nRewrite:",
        history_block(&history),
        instance.current_query
    );

    let mut sections: Vec<(String, String)> = Vec::with_capacity(examples.len() + 3);
    sections.push(("task_definition".to_string(), spec.task_definition.clone()));
    sections.push(("format_note".to_string(), spec.format_note.clone()));
    for (i, example) in examples.iter().enumerate() {
        sections.push((
            format!("example_{}", i + 1),
            format!("Example {}:\n{}", i + 1, render_example(example)),
        ));
    }
    sections.push(("test_input".to_string(), test_block));

    let mut text = String::new();
    let mut section_spans = Vec::with_capacity(sections.len());
    let last = sections.len() - 1;
    for (i, (name, body)) in sections.into_iter().enumerate() {
        let start = text.len();
        text.push_str(&body);
        if i < last {
            text.push_str("\n\n");
        }
        section_spans.push(SectionSpan {
            name,
            start,
            end: text.len(),
        });
    }
    let content_hash = sha256_hex(text.as_bytes());
    Ok(RenderedPrompt {
        text,
        section_spans,
        content_hash,
        test_query: instance.current_query.clone(),
        test_history: history,
    })
}

/// Hex-encoded SHA-256 digest.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for byte in digest {
        write!(out, "{byte:02x}").expect("string write");
    }
    out
}
