//! Rewrite backends and batch dispatch.
//!
//! A [`Rewriter`] turns rendered prompts into rewrites through one of four
//! backends:
//!
//! * `http_chat`: POSTs the prompt to an OpenAI-style chat-completion
//!   endpoint, with bounded retries and exponential backoff on transient
//!   failures.
//! * `identity`: returns the current query unchanged. The no-rewrite
//!   baseline.
//! * `concat`: a deterministic heuristic that splices the most recent
//!   capitalized phrase from the history into the query.
//! * `replay`: serves previously cached outputs by prompt hash and fails on
//!   a miss. This is how recorded model runs are re-evaluated offline.
//!
//! All backends share an optional append-only JSONL cache keyed by prompt
//! content hash. `http_chat` consults it before going to the network;
//! `identity` and `concat` write through to it so a later `replay` run can
//! reuse their outputs; `replay` reads it and never writes.

use std::collections::HashMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::{Mutex, RwLock};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Turn;
use crate::prompt::RenderedPrompt;

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("backend config: {0}")]
    InvalidConfig(String),
    #[error("cache miss for prompt hash {hash}")]
    CacheMiss { hash: String },
    #[error("cache file {path}: {detail}")]
    Cache { path: String, detail: String },
    #[error("http request failed after {attempts} attempt(s): {detail}")]
    Http { attempts: u32, detail: String },
    #[error("unexpected response shape: {0}")]
    BadResponse(String),
}

/// Errors from [`Rewriter::batch_rewrite`].
#[derive(Debug, Error)]
pub enum BatchError {
    #[error("parallelism must be >= 1")]
    InvalidParallelism,
    #[error("prompt {index} failed")]
    Item {
        index: usize,
        #[source]
        source: LlmError,
    },
    /// Fail-fast was off and at least one prompt failed; the per-index
    /// results of the prompts that succeeded are preserved.
    #[error("{} prompt(s) failed, first at index {}", .failures.len(), .failures.first().map_or(0, |f| f.0))]
    Partial {
        results: Vec<Option<RewriteResult>>,
        failures: Vec<(usize, LlmError)>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    HttpChat,
    Identity,
    Concat,
    Replay,
}

fn default_max_output() -> u32 {
    256
}

fn default_timeout_ms() -> u64 {
    30_000
}

fn default_max_retries() -> u32 {
    3
}

fn default_auth_env() -> String {
    "CQR_API_TOKEN".to_string()
}

/// Backend selection and tuning. Serializable so run configurations can pin
/// it; unknown fields are rejected to catch config typos early.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendConfig {
    pub kind: BackendKind,
    /// Chat-completion URL; required for `http_chat`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    /// Model identifier sent in the request body; required for `http_chat`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_name: Option<String>,
    /// Sampling temperature. The default 0.0 keeps runs reproducible.
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_max_output")]
    pub max_output: u32,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    /// Retries after the first attempt on transient HTTP failures.
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    /// JSONL cache location; required for `replay`, optional elsewhere.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache_path: Option<PathBuf>,
    /// Environment variable read for a bearer token; unset or empty means
    /// the request is sent without authentication.
    #[serde(default = "default_auth_env")]
    pub auth_env: String,
}

impl BackendConfig {
    pub fn identity() -> Self {
        BackendConfig {
            kind: BackendKind::Identity,
            endpoint: None,
            model_name: None,
            temperature: 0.0,
            max_output: default_max_output(),
            timeout_ms: default_timeout_ms(),
            max_retries: default_max_retries(),
            cache_path: None,
            auth_env: default_auth_env(),
        }
    }

    pub fn concat() -> Self {
        BackendConfig {
            kind: BackendKind::Concat,
            ..BackendConfig::identity()
        }
    }

    pub fn replay(cache_path: PathBuf) -> Self {
        BackendConfig {
            kind: BackendKind::Replay,
            cache_path: Some(cache_path),
            ..BackendConfig::identity()
        }
    }

    pub fn http_chat(endpoint: &str, model_name: &str) -> Self {
        BackendConfig {
            kind: BackendKind::HttpChat,
            endpoint: Some(endpoint.to_string()),
            model_name: Some(model_name.to_string()),
            ..BackendConfig::identity()
        }
    }

    /// Stable identifier recorded with every result, so artifacts name the
    /// system that produced them.
    pub fn backend_id(&self) -> String {
        match self.kind {
            BackendKind::Identity => "identity".to_string(),
            BackendKind::Concat => "concat".to_string(),
            BackendKind::Replay => "replay".to_string(),
            BackendKind::HttpChat => {
                format!("http:{}", self.model_name.as_deref().unwrap_or("unknown"))
            }
        }
    }

    pub fn validate(&self) -> Result<(), LlmError> {
        match self.kind {
            BackendKind::HttpChat => {
                if self.endpoint.as_deref().map_or(true, |e| e.trim().is_empty()) {
                    return Err(LlmError::InvalidConfig(
                        "http_chat requires an endpoint".to_string(),
                    ));
                }
                if self.model_name.as_deref().map_or(true, |m| m.trim().is_empty()) {
                    return Err(LlmError::InvalidConfig(
                        "http_chat requires a model_name".to_string(),
                    ));
                }
            }
            BackendKind::Replay => {
                if self.cache_path.is_none() {
                    return Err(LlmError::InvalidConfig(
                        "replay requires a cache_path".to_string(),
                    ));
                }
            }
            BackendKind::Identity | BackendKind::Concat => {}
        }
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err(LlmError::InvalidConfig(
                "temperature must be finite and >= 0".to_string(),
            ));
        }
        Ok(())
    }
}

/// One rewrite, with enough provenance to audit where it came from.
#[derive(Debug, Clone, Serialize)]
pub struct RewriteResult {
    /// The parsed standalone query.
    pub rewrite: String,
    /// The unparsed backend output the rewrite was extracted from.
    pub raw_output: String,
    pub backend_id: String,
    pub from_cache: bool,
    pub latency_ms: u64,
    /// True when the backend produced an empty rewrite and the current
    /// query was substituted verbatim.
    pub used_fallback: bool,
}

/// Extracts the standalone query from raw model output.
///
/// Takes the text after the last `Rewrite:` marker (models often echo the
/// prompt), then the first non-blank line of it, trimmed, with matched
/// surrounding quote pairs repeatedly stripped. Idempotent: parsing an
/// already-parsed rewrite returns it unchanged.
pub fn parse_rewrite(raw: &str) -> String {
    let tail = match raw.rfind("Rewrite:") {
        Some(pos) => &raw[pos + "Rewrite:".len()..],
        None => raw,
    };
    let line = tail.lines().find(|l| !l.trim().is_empty()).unwrap_or("");
    let mut out = line.trim();
    loop {
        let stripped = strip_quote_pair(out).trim();
        if stripped == out {
            break;
        }
        out = stripped;
    }
    out.to_string()
}

fn strip_quote_pair(s: &str) -> &str {
    let bytes = s.as_bytes();
    if bytes.len() >= 2 {
        let first = bytes[0];
        let last = bytes[bytes.len() - 1];
        if first == last && (first == b'"' || first == b'\'') {
            return &s[1..s.len() - 1];
        }
    }
    s
}

/// On-disk cache record. One JSON object per line, append-only.
#[derive(Debug, Serialize, Deserialize)]
struct CacheRecord {
    hash: String,
    backend_id: String,
    temperature: f64,
    raw: String,
}

fn composite_key(hash: &str, backend_id: &str, temperature: f64) -> String {
    format!("{hash}|{backend_id}|{temperature}")
}

/// In-memory view of the JSONL cache plus its append handle. Lookups go
/// through an RwLock so concurrent batch workers can read freely; appends
/// serialize on the file mutex.
struct Cache {
    path: PathBuf,
    by_key: RwLock<HashMap<String, String>>,
    by_hash: RwLock<HashMap<String, String>>,
    file: Mutex<fs::File>,
}

impl Cache {
    fn open(path: &Path) -> Result<Cache, LlmError> {
        let cache_err = |detail: String| LlmError::Cache {
            path: path.display().to_string(),
            detail,
        };
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent).map_err(|e| cache_err(e.to_string()))?;
            }
        }
        let mut by_key = HashMap::new();
        let mut by_hash = HashMap::new();
        if path.exists() {
            let text = fs::read_to_string(path).map_err(|e| cache_err(e.to_string()))?;
            for (idx, line) in text.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let record: CacheRecord = serde_json::from_str(line)
                    .map_err(|e| cache_err(format!("line {}: {e}", idx + 1)))?;
                by_key.insert(
                    composite_key(&record.hash, &record.backend_id, record.temperature),
                    record.raw.clone(),
                );
                by_hash.insert(record.hash, record.raw);
            }
        }
        let file = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| cache_err(e.to_string()))?;
        Ok(Cache {
            path: path.to_path_buf(),
            by_key: RwLock::new(by_key),
            by_hash: RwLock::new(by_hash),
            file: Mutex::new(file),
        })
    }

    fn get_by_key(&self, hash: &str, backend_id: &str, temperature: f64) -> Option<String> {
        self.by_key
            .read()
            .expect("cache lock")
            .get(&composite_key(hash, backend_id, temperature))
            .cloned()
    }

    /// Replay lookup: the newest record for the hash, regardless of which
    /// backend or temperature produced it.
    fn get_by_hash(&self, hash: &str) -> Option<String> {
        self.by_hash.read().expect("cache lock").get(hash).cloned()
    }

    /// Records an output, skipping keys that are already present so reruns
    /// do not grow the file.
    fn put(&self, hash: &str, backend_id: &str, temperature: f64, raw: &str) -> Result<(), LlmError> {
        let key = composite_key(hash, backend_id, temperature);
        {
            let mut by_key = self.by_key.write().expect("cache lock");
            if by_key.contains_key(&key) {
                return Ok(());
            }
            by_key.insert(key, raw.to_string());
            self.by_hash
                .write()
                .expect("cache lock")
                .insert(hash.to_string(), raw.to_string());
        }
        let record = CacheRecord {
            hash: hash.to_string(),
            backend_id: backend_id.to_string(),
            temperature,
            raw: raw.to_string(),
        };
        let line = serde_json::to_string(&record).expect("cache record serializes");
        let mut file = self.file.lock().expect("cache file lock");
        writeln!(file, "{line}").map_err(|e| LlmError::Cache {
            path: self.path.display().to_string(),
            detail: e.to_string(),
        })
    }
}

/// Chat-completion request/response wire types (OpenAI-style).
#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: [ChatMessage<'a>; 1],
    temperature: f64,
    max_tokens: u32,
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'static str,
    content: &'a str,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatChoiceMessage,
}

#[derive(Deserialize)]
struct ChatChoiceMessage {
    content: Option<String>,
}

/// Prompt-to-rewrite engine. Thread-safe: batch workers share one instance.
pub struct Rewriter {
    config: BackendConfig,
    backend_id: String,
    cache: Option<Cache>,
    client: Option<reqwest::blocking::Client>,
    network_calls: AtomicU64,
}

impl Rewriter {
    pub fn new(config: BackendConfig) -> Result<Rewriter, LlmError> {
        config.validate()?;
        let cache = match &config.cache_path {
            Some(path) => Some(Cache::open(path)?),
            None => None,
        };
        let client = if config.kind == BackendKind::HttpChat {
            Some(
                reqwest::blocking::Client::builder()
                    .timeout(Duration::from_millis(config.timeout_ms))
                    .build()
                    .map_err(|e| LlmError::InvalidConfig(e.to_string()))?,
            )
        } else {
            None
        };
        Ok(Rewriter {
            backend_id: config.backend_id(),
            config,
            cache,
            client,
            network_calls: AtomicU64::new(0),
        })
    }

    pub fn backend_id(&self) -> &str {
        &self.backend_id
    }

    /// Number of HTTP requests sent since construction (retries included).
    /// Offline backends and cache hits never increment it.
    pub fn network_calls(&self) -> u64 {
        self.network_calls.load(Ordering::Relaxed)
    }

    /// Rewrites one prompt. An empty backend output falls back to the
    /// current query verbatim, flagged via `used_fallback`.
    pub fn rewrite(&self, prompt: &RenderedPrompt) -> Result<RewriteResult, LlmError> {
        let start = Instant::now();
        let (rewrite, raw_output, from_cache) = match self.config.kind {
            BackendKind::Identity => {
                let raw = prompt.test_query.clone();
                self.write_through(&prompt.content_hash, &raw)?;
                (raw.clone(), raw, false)
            }
            BackendKind::Concat => {
                let raw = concat_rewrite(&prompt.test_query, &prompt.test_history);
                self.write_through(&prompt.content_hash, &raw)?;
                (raw.clone(), raw, false)
            }
            BackendKind::Replay => {
                let cache = self.cache.as_ref().expect("replay config carries a cache");
                let raw = cache.get_by_hash(&prompt.content_hash).ok_or_else(|| {
                    LlmError::CacheMiss {
                        hash: prompt.content_hash.clone(),
                    }
                })?;
                (parse_rewrite(&raw), raw, true)
            }
            BackendKind::HttpChat => {
                let cached = self.cache.as_ref().and_then(|c| {
                    c.get_by_key(&prompt.content_hash, &self.backend_id, self.config.temperature)
                });
                match cached {
                    Some(raw) => (parse_rewrite(&raw), raw, true),
                    None => {
                        let raw = self.http_generate(&prompt.text)?;
                        if let Some(cache) = &self.cache {
                            cache.put(
                                &prompt.content_hash,
                                &self.backend_id,
                                self.config.temperature,
                                &raw,
                            )?;
                        }
                        (parse_rewrite(&raw), raw, false)
                    }
                }
            }
        };
        let used_fallback = rewrite.trim().is_empty();
        let rewrite = if used_fallback {
            log::warn!(
                "backend {} produced an empty rewrite for hash {}; falling back to the query",
                self.backend_id,
                prompt.content_hash
            );
            prompt.test_query.clone()
        } else {
            rewrite
        };
        Ok(RewriteResult {
            rewrite,
            raw_output,
            backend_id: self.backend_id.clone(),
            from_cache,
            latency_ms: start.elapsed().as_millis() as u64,
            used_fallback,
        })
    }

    fn write_through(&self, hash: &str, raw: &str) -> Result<(), LlmError> {
        if let Some(cache) = &self.cache {
            cache.put(hash, &self.backend_id, self.config.temperature, raw)?;
        }
        Ok(())
    }

    fn http_generate(&self, prompt_text: &str) -> Result<String, LlmError> {
        let endpoint = self.config.endpoint.as_deref().expect("validated config");
        let model = self.config.model_name.as_deref().expect("validated config");
        let client = self.client.as_ref().expect("http config builds a client");
        let body = ChatRequest {
            model,
            messages: [ChatMessage {
                role: "user",
                content: prompt_text,
            }],
            temperature: self.config.temperature,
            max_tokens: self.config.max_output,
        };
        let token = std::env::var(&self.config.auth_env).ok().filter(|t| !t.is_empty());
        let mut attempt = 0u32;
        loop {
            attempt += 1;
            self.network_calls.fetch_add(1, Ordering::Relaxed);
            let mut request = client.post(endpoint).json(&body);
            if let Some(token) = &token {
                request = request.bearer_auth(token);
            }
            let (transient, detail) = match request.send() {
                Ok(response) => {
                    let status = response.status();
                    if status.is_success() {
                        let parsed: ChatResponse = response
                            .json()
                            .map_err(|e| LlmError::BadResponse(e.to_string()))?;
                        let content = parsed
                            .choices
                            .into_iter()
                            .next()
                            .ok_or_else(|| LlmError::BadResponse("no choices".to_string()))?
                            .message
                            .content
                            .unwrap_or_default();
                        return Ok(content);
                    }
                    let transient = status.as_u16() == 408
                        || status.as_u16() == 429
                        || status.is_server_error();
                    (transient, format!("status {status}"))
                }
                Err(e) => (e.is_timeout() || e.is_connect(), e.to_string()),
            };
            if !transient || attempt > self.config.max_retries {
                return Err(LlmError::Http {
                    attempts: attempt,
                    detail,
                });
            }
            let backoff = Duration::from_millis(100u64.saturating_mul(1 << attempt.min(6)));
            log::warn!(
                "attempt {attempt} failed ({detail}); retrying in {}ms",
                backoff.as_millis()
            );
            std::thread::sleep(backoff);
        }
    }

    /// Rewrites a batch with at most `parallelism` worker threads, returning
    /// results in input order. With `fail_fast`, in-flight work finishes but
    /// no new work starts after the first failure, and that failure (the
    /// lowest-indexed one) is returned. Without it, all prompts are
    /// attempted and any failures are collected into [`BatchError::Partial`].
    pub fn batch_rewrite(
        &self,
        prompts: &[RenderedPrompt],
        parallelism: usize,
        fail_fast: bool,
    ) -> Result<Vec<RewriteResult>, BatchError> {
        if parallelism == 0 {
            return Err(BatchError::InvalidParallelism);
        }
        let slots: Vec<Mutex<Option<Result<RewriteResult, LlmError>>>> =
            prompts.iter().map(|_| Mutex::new(None)).collect();
        let next = AtomicUsize::new(0);
        let stop = AtomicBool::new(false);
        let workers = parallelism.min(prompts.len().max(1));
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    if fail_fast && stop.load(Ordering::Relaxed) {
                        break;
                    }
                    let index = next.fetch_add(1, Ordering::Relaxed);
                    if index >= prompts.len() {
                        break;
                    }
                    let outcome = self.rewrite(&prompts[index]);
                    if outcome.is_err() && fail_fast {
                        stop.store(true, Ordering::Relaxed);
                    }
                    *slots[index].lock().expect("slot lock") = Some(outcome);
                });
            }
        });
        let mut results: Vec<Option<RewriteResult>> = Vec::with_capacity(prompts.len());
        let mut failures: Vec<(usize, LlmError)> = Vec::new();
        for (index, slot) in slots.into_iter().enumerate() {
            match slot.into_inner().expect("slot lock") {
                Some(Ok(result)) => results.push(Some(result)),
                Some(Err(error)) => {
                    results.push(None);
                    failures.push((index, error));
                }
                None => results.push(None),
            }
        }
        if !failures.is_empty() {
            if fail_fast {
                let (index, source) = failures.remove(0);
                return Err(BatchError::Item { index, source });
            }
            return Err(BatchError::Partial { results, failures });
        }
        Ok(results.into_iter().map(|r| r.expect("no failures recorded")).collect())
    }
}

const PRONOUNS: [&str; 9] = ["it", "its", "they", "them", "their", "he", "she", "his", "her"];

const PHRASE_STOPWORDS: [&str; 22] = [
    "the", "a", "an", "i", "you", "what", "who", "where", "when", "why", "how", "is", "are",
    "do", "does", "did", "find", "tell", "me", "and", "system", "user",
];

/// The concat baseline: resolve a pronoun in the query with the most recent
/// capitalized phrase from the history, or append that phrase when the query
/// has no pronoun and does not already mention it. With no history or no
/// usable phrase, the query passes through unchanged.
pub fn concat_rewrite(query: &str, history: &[Turn]) -> String {
    let Some(phrase) = latest_capitalized_phrase(history) else {
        return query.to_string();
    };
    let mut replaced = false;
    let words: Vec<String> = query
        .split_whitespace()
        .map(|word| {
            let bare = word.trim_matches(|c: char| !c.is_alphanumeric());
            if !replaced && !bare.is_empty() && PRONOUNS.contains(&bare.to_lowercase().as_str()) {
                replaced = true;
                word.replacen(bare, &phrase, 1)
            } else {
                word.to_string()
            }
        })
        .collect();
    if replaced {
        return words.join(" ");
    }
    if query.to_lowercase().contains(&phrase.to_lowercase()) {
        return query.to_string();
    }
    format!("{query} {phrase}")
}

/// Scans the history newest-first (system response before user utterance
/// within a turn) for the last run of capitalized words that is not entirely
/// stopwords, e.g. "The capital of France is Paris." yields "Paris".
fn latest_capitalized_phrase(history: &[Turn]) -> Option<String> {
    for turn in history.iter().rev() {
        let texts = [turn.system_response.as_deref(), Some(turn.user_utterance.as_str())];
        for text in texts.into_iter().flatten() {
            if let Some(phrase) = capitalized_runs(text).into_iter().last() {
                return Some(phrase);
            }
        }
    }
    None
}

fn capitalized_runs(text: &str) -> Vec<String> {
    let mut runs = Vec::new();
    let mut current: Vec<&str> = Vec::new();
    let flush = |current: &mut Vec<&str>, runs: &mut Vec<String>| {
        if !current.is_empty() {
            let all_stop = current
                .iter()
                .all(|w| PHRASE_STOPWORDS.contains(&w.to_lowercase().as_str()));
            if !all_stop {
                runs.push(current.join(" "));
            }
            current.clear();
        }
    };
    for word in text.split_whitespace() {
        let bare = word.trim_matches(|c: char| !c.is_alphanumeric());
        if bare.chars().next().is_some_and(char::is_uppercase) {
            current.push(bare);
            // Sentence-final punctuation ends the phrase even though the
            // next word will be capitalized.
            if word.ends_with(['.', '!', '?', ',', ';', ':']) {
                flush(&mut current, &mut runs);
            }
        } else {
            flush(&mut current, &mut runs);
        }
    }
    flush(&mut current, &mut runs);
    runs
}
