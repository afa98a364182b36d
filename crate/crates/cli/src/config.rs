//! Run configuration: a single JSON file drives every command.
//!
//! Parsing is two-phase. The raw layer accepts whatever JSON decodes into it
//! (signed integers, free-form strings) so that validation can report every
//! problem with a field path instead of stopping at the first serde error.
//! The validated [`Config`] then carries typed values and absolute paths;
//! relative paths in the file are resolved against the config's directory.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use cqr_core::corpus::ConversationFormat;
use cqr_core::llm::{BackendConfig, BackendKind};
use cqr_core::prompt::SelectionStrategy;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    dataset: RawDataset,
    #[serde(default)]
    prompt: RawPrompt,
    backend: serde_json::Value,
    evaluation: RawEvaluation,
    #[serde(default = "default_output_dir")]
    output_dir: String,
    #[serde(default)]
    seed: i64,
    #[serde(default = "default_parallelism")]
    parallelism: i64,
}

fn default_output_dir() -> String {
    "out".to_string()
}

fn default_parallelism() -> i64 {
    1
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDataset {
    id: String,
    conversations: String,
    #[serde(default = "default_format")]
    format: String,
    #[serde(default)]
    annotations: Option<String>,
}

fn default_format() -> String {
    "canonical".to_string()
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPrompt {
    #[serde(default)]
    task_definition: Option<String>,
    #[serde(default)]
    format_note: Option<String>,
    #[serde(default)]
    example_pool: Option<String>,
    #[serde(default = "default_shot_count")]
    shot_count: i64,
    #[serde(default = "default_selection")]
    selection: String,
    #[serde(default = "default_history_budget")]
    history_budget: i64,
}

impl Default for RawPrompt {
    fn default() -> RawPrompt {
        RawPrompt {
            task_definition: None,
            format_note: None,
            example_pool: None,
            shot_count: default_shot_count(),
            selection: default_selection(),
            history_budget: default_history_budget(),
        }
    }
}

fn default_shot_count() -> i64 {
    5
}

fn default_selection() -> String {
    "first_k".to_string()
}

fn default_history_budget() -> i64 {
    4000
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEvaluation {
    qrels: String,
    documents: String,
    #[serde(default = "default_success_k")]
    success_k: i64,
    #[serde(default = "default_shot_counts")]
    shot_counts: Vec<i64>,
    #[serde(default = "default_pairwise_sample_size")]
    pairwise_sample_size: i64,
}

fn default_success_k() -> i64 {
    10
}

fn default_shot_counts() -> Vec<i64> {
    vec![0, 2, 5]
}

fn default_pairwise_sample_size() -> i64 {
    10
}

/// Validated, fully resolved run configuration.
#[derive(Debug, Clone)]
pub struct Config {
    pub dataset_id: String,
    pub conversations: PathBuf,
    pub format: ConversationFormat,
    pub annotations: Option<PathBuf>,
    pub task_definition: Option<String>,
    pub format_note: Option<String>,
    pub example_pool: Option<PathBuf>,
    pub shot_count: usize,
    pub selection: SelectionStrategy,
    pub history_budget: usize,
    pub backend: BackendConfig,
    pub qrels: PathBuf,
    pub documents: PathBuf,
    pub success_k: usize,
    pub shot_counts: Vec<usize>,
    pub pairwise_sample_size: usize,
    pub output_dir: PathBuf,
    pub seed: u64,
    pub parallelism: usize,
}

/// Command-line overrides applied on top of the file.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub parallelism: Option<usize>,
    pub backend: Option<String>,
}

fn resolve(base: &Path, raw: &str) -> PathBuf {
    let p = Path::new(raw);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn check_exists(path: &Path, field: &str, violations: &mut Vec<String>) {
    if !path.is_file() {
        violations.push(format!("{field}: file not found: {}", path.display()));
    }
}

fn non_negative(value: i64, field: &str, violations: &mut Vec<String>) -> usize {
    if value < 0 {
        violations.push(format!("{field} must be >= 0"));
        0
    } else {
        value as usize
    }
}

fn positive(value: i64, field: &str, violations: &mut Vec<String>) -> usize {
    if value < 1 {
        violations.push(format!("{field} must be >= 1"));
        1
    } else {
        value as usize
    }
}

/// Loads, validates, and resolves a config file, applying overrides. The
/// error side lists every violation found, each prefixed with the offending
/// field path.
pub fn load_config(path: &Path, overrides: &Overrides) -> Result<Config, Vec<String>> {
    let text = fs::read_to_string(path)
        .map_err(|e| vec![format!("cannot read config {}: {e}", path.display())])?;
    let raw: RawConfig =
        serde_json::from_str(&text).map_err(|e| vec![format!("config parse error: {e}")])?;
    let base = path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf();

    let mut violations = Vec::new();

    if raw.dataset.id.trim().is_empty() {
        violations.push("dataset.id must be non-empty".to_string());
    }
    let conversations = resolve(&base, &raw.dataset.conversations);
    check_exists(&conversations, "dataset.conversations", &mut violations);
    let format = match raw.dataset.format.as_str() {
        "canonical" => ConversationFormat::Canonical,
        "cast_like" => ConversationFormat::CastLike,
        "taskmaster_like" => ConversationFormat::TaskmasterLike,
        other => {
            violations.push(format!(
                "dataset.format must be one of canonical, cast_like, taskmaster_like (got \"{other}\")"
            ));
            ConversationFormat::Canonical
        }
    };
    let annotations = raw.dataset.annotations.as_ref().map(|a| {
        let p = resolve(&base, a);
        check_exists(&p, "dataset.annotations", &mut violations);
        p
    });

    let example_pool = raw.prompt.example_pool.as_ref().map(|e| {
        let p = resolve(&base, e);
        check_exists(&p, "prompt.example_pool", &mut violations);
        p
    });
    let shot_count = non_negative(raw.prompt.shot_count, "prompt.shot_count", &mut violations);
    let selection = match raw.prompt.selection.as_str() {
        "first_k" => SelectionStrategy::FirstK,
        "seeded_random" => SelectionStrategy::SeededRandom,
        "category_balanced" => SelectionStrategy::CategoryBalanced,
        other => {
            violations.push(format!(
                "prompt.selection must be one of first_k, seeded_random, category_balanced (got \"{other}\")"
            ));
            SelectionStrategy::FirstK
        }
    };
    let history_budget = positive(
        raw.prompt.history_budget,
        "prompt.history_budget",
        &mut violations,
    );

    let mut backend = match serde_json::from_value::<BackendConfig>(raw.backend.clone()) {
        Ok(b) => b,
        Err(e) => {
            violations.push(format!("backend: {e}"));
            BackendConfig::identity()
        }
    };
    if let Some(cache) = backend.cache_path.take() {
        backend.cache_path = Some(resolve(&base, &cache.to_string_lossy()));
    }

    let qrels = resolve(&base, &raw.evaluation.qrels);
    check_exists(&qrels, "evaluation.qrels", &mut violations);
    let documents = resolve(&base, &raw.evaluation.documents);
    check_exists(&documents, "evaluation.documents", &mut violations);
    let success_k = positive(raw.evaluation.success_k, "evaluation.success_k", &mut violations);
    if raw.evaluation.shot_counts.is_empty() {
        violations.push("evaluation.shot_counts must be non-empty".to_string());
    }
    let shot_counts: Vec<usize> = raw
        .evaluation
        .shot_counts
        .iter()
        .map(|&k| non_negative(k, "evaluation.shot_counts", &mut violations))
        .collect();
    let pairwise_sample_size = non_negative(
        raw.evaluation.pairwise_sample_size,
        "evaluation.pairwise_sample_size",
        &mut violations,
    );

    if raw.seed < 0 {
        violations.push("seed must be >= 0".to_string());
    }
    let parallelism = positive(raw.parallelism, "parallelism", &mut violations);

    let mut config = Config {
        dataset_id: raw.dataset.id,
        conversations,
        format,
        annotations,
        task_definition: raw.prompt.task_definition,
        format_note: raw.prompt.format_note,
        example_pool,
        shot_count,
        selection,
        history_budget,
        backend,
        qrels,
        documents,
        success_k,
        shot_counts,
        pairwise_sample_size,
        output_dir: resolve(&base, &raw.output_dir),
        seed: raw.seed.max(0) as u64,
        parallelism,
    };

    if let Some(out) = &overrides.out {
        config.output_dir = out.clone();
    }
    if let Some(seed) = overrides.seed {
        config.seed = seed;
    }
    if let Some(parallelism) = overrides.parallelism {
        if parallelism == 0 {
            violations.push("parallelism must be >= 1".to_string());
        } else {
            config.parallelism = parallelism;
        }
    }
    if let Some(name) = &overrides.backend {
        match name.as_str() {
            "identity" => config.backend.kind = BackendKind::Identity,
            "concat" => config.backend.kind = BackendKind::Concat,
            "replay" => config.backend.kind = BackendKind::Replay,
            "http_chat" => config.backend.kind = BackendKind::HttpChat,
            other => violations.push(format!(
                "backend override must be one of identity, concat, replay, http_chat (got \"{other}\")"
            )),
        }
    }
    if let Err(e) = config.backend.validate() {
        violations.push(format!("backend: {e}"));
    }
    if config.backend.kind == BackendKind::Replay {
        match &config.backend.cache_path {
            Some(cache) => check_exists(cache, "backend.cache_path", &mut violations),
            None => {}
        }
    }

    if violations.is_empty() {
        Ok(config)
    } else {
        Err(violations)
    }
}
