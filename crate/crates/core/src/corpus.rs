//! Dataset ingestion and normalization.
//!
//! Conversations arrive in one of three formats and are normalized into a
//! single in-memory model of alternating user/system turns. Each turn with a
//! gold rewrite doubles as an evaluation target; [`make_instances`] expands a
//! conversation into one [`RewriteInstance`] per turn, keyed as
//! `<conversation_id>_<turn_index>` with 1-based turn indices. Relevance
//! judgments and ellipticity annotations reference instances by that key.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("failed to write {path}: {source}")]
    Write {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {location}: malformed record: {detail}")]
    Malformed {
        path: String,
        location: Location,
        detail: String,
    },
    #[error("{path}: duplicate conversation id \"{id}\"")]
    DuplicateConversationId { path: String, id: String },
    #[error("{path}: duplicate doc id \"{id}\"")]
    DuplicateDocId { path: String, id: String },
    #[error("{path}: line {line}: unknown label \"{label}\" (expected \"elliptical\" or \"non_elliptical\")")]
    UnknownLabel {
        path: String,
        line: usize,
        label: String,
    },
}

/// Where in a source file a malformed record sits. Line-oriented formats
/// report a line number; whole-file formats report a record index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Location {
    Line(usize),
    Record(usize),
}

impl fmt::Display for Location {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Location::Line(n) => write!(f, "line {n}"),
            Location::Record(n) => write!(f, "record {n}"),
        }
    }
}

/// Supported on-disk conversation formats.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConversationFormat {
    /// JSON Lines, one conversation per line; see [`ConversationRecord`].
    Canonical,
    /// A JSON array of topics, each with numbered turns carrying
    /// `raw_utterance` and optionally `manual_rewritten_utterance`.
    CastLike,
    /// A JSON array of conversations with a flat `utterances` list of
    /// speaker-tagged texts that must be merged into turns.
    TaskmasterLike,
}

/// One conversation turn: a user utterance, the system's response to it (the
/// final turn may not have one yet), and an optional gold standalone rewrite
/// of the user utterance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Turn {
    pub user_utterance: String,
    pub system_response: Option<String>,
    pub gold_rewrite: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Conversation {
    pub id: String,
    pub turns: Vec<Turn>,
}

/// One evaluation target: the conversation so far, the query to rewrite, and
/// the references it is scored against.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RewriteInstance {
    pub conversation_id: String,
    /// 1-based position of the current query within its conversation.
    pub turn_index: usize,
    /// All turns strictly before the current query.
    pub history: Vec<Turn>,
    pub current_query: String,
    pub gold_rewrite: Option<String>,
    /// Ellipticity annotation; `None` until annotations are applied or for
    /// unannotated instances.
    pub elliptical: Option<bool>,
}

impl RewriteInstance {
    pub fn key(&self) -> String {
        instance_key(&self.conversation_id, self.turn_index)
    }
}

/// The join key between instances, qrels, and annotations.
pub fn instance_key(conversation_id: &str, turn_index: usize) -> String {
    format!("{conversation_id}_{turn_index}")
}

/// Graded relevance judgments keyed by instance key, then document id.
/// Unjudged pairs read as grade 0.
#[derive(Debug, Clone, Default)]
pub struct Qrels {
    judgments: HashMap<String, HashMap<String, u32>>,
}

impl Qrels {
    pub fn grade(&self, instance_key: &str, doc_id: &str) -> u32 {
        self.judgments
            .get(instance_key)
            .and_then(|docs| docs.get(doc_id))
            .copied()
            .unwrap_or(0)
    }

    /// A document counts as relevant at grade 1 and above.
    pub fn is_relevant(&self, instance_key: &str, doc_id: &str) -> bool {
        self.grade(instance_key, doc_id) >= 1
    }

    /// Whether any judgment row exists for the instance, at any grade.
    pub fn has_judgments(&self, instance_key: &str) -> bool {
        self.judgments.contains_key(instance_key)
    }

    pub fn len(&self) -> usize {
        self.judgments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.judgments.is_empty()
    }

    pub fn insert(&mut self, instance_key: &str, doc_id: &str, grade: u32) {
        self.judgments
            .entry(instance_key.to_string())
            .or_default()
            .insert(doc_id.to_string(), grade);
    }
}

/// One retrievable document.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub body: String,
}

/// Canonical on-disk form of a turn.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurnRecord {
    pub user: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub system: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rewrite: Option<String>,
    /// Free-form phenomenon tag (e.g. "coreference"); only consulted when a
    /// record is used as an in-context example.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
}

/// Canonical on-disk form of a conversation: one JSON object per line.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConversationRecord {
    pub id: String,
    pub turns: Vec<TurnRecord>,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum IdValue {
    Num(i64),
    Str(String),
}

impl IdValue {
    fn into_string(self) -> String {
        match self {
            IdValue::Num(n) => n.to_string(),
            IdValue::Str(s) => s,
        }
    }
}

#[derive(Debug, Deserialize)]
struct CastTopic {
    number: IdValue,
    turn: Vec<CastTurn>,
}

#[derive(Debug, Deserialize)]
struct CastTurn {
    raw_utterance: String,
    #[serde(default)]
    manual_rewritten_utterance: Option<String>,
}

#[derive(Debug, Deserialize)]
struct TaskmasterConversation {
    conversation_id: String,
    utterances: Vec<TaskmasterUtterance>,
}

#[derive(Debug, Deserialize)]
struct TaskmasterUtterance {
    speaker: String,
    text: String,
}

fn read_file(path: &Path) -> Result<String, CorpusError> {
    fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Parses a canonical JSONL file into raw records, keeping the 1-based line
/// number of each record for error reporting. Blank lines are skipped.
pub fn read_canonical_records(path: &Path) -> Result<Vec<(usize, ConversationRecord)>, CorpusError> {
    let text = read_file(path)?;
    let mut records = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: ConversationRecord =
            serde_json::from_str(line).map_err(|e| CorpusError::Malformed {
                path: path.display().to_string(),
                location: Location::Line(idx + 1),
                detail: e.to_string(),
            })?;
        records.push((idx + 1, record));
    }
    Ok(records)
}

/// Loads conversations from any supported format. Every turn must carry a
/// non-empty user utterance (after trimming); conversation ids must be
/// non-empty and unique within the file.
pub fn load_conversations(
    path: &Path,
    format: ConversationFormat,
) -> Result<Vec<Conversation>, CorpusError> {
    let conversations = match format {
        ConversationFormat::Canonical => load_canonical(path)?,
        ConversationFormat::CastLike => load_cast_like(path)?,
        ConversationFormat::TaskmasterLike => load_taskmaster_like(path)?,
    };
    let mut seen = HashSet::new();
    for conv in &conversations {
        if !seen.insert(conv.id.clone()) {
            return Err(CorpusError::DuplicateConversationId {
                path: path.display().to_string(),
                id: conv.id.clone(),
            });
        }
    }
    Ok(conversations)
}

fn validate_turns(
    path: &Path,
    location: Location,
    id: &str,
    turns: Vec<Turn>,
) -> Result<Conversation, CorpusError> {
    let malformed = |detail: String| CorpusError::Malformed {
        path: path.display().to_string(),
        location: location.clone(),
        detail,
    };
    if id.trim().is_empty() {
        return Err(malformed("field \"id\" must be non-empty".to_string()));
    }
    if turns.is_empty() {
        return Err(malformed("field \"turns\" must be non-empty".to_string()));
    }
    for (i, turn) in turns.iter().enumerate() {
        if turn.user_utterance.trim().is_empty() {
            return Err(malformed(format!(
                "field \"turns[{i}].user\" must be non-empty"
            )));
        }
    }
    Ok(Conversation {
        id: id.to_string(),
        turns,
    })
}

fn load_canonical(path: &Path) -> Result<Vec<Conversation>, CorpusError> {
    read_canonical_records(path)?
        .into_iter()
        .map(|(line, record)| {
            let turns = record
                .turns
                .into_iter()
                .map(|t| Turn {
                    user_utterance: t.user,
                    system_response: t.system,
                    gold_rewrite: t.rewrite,
                })
                .collect();
            validate_turns(path, Location::Line(line), &record.id, turns)
        })
        .collect()
}

fn load_cast_like(path: &Path) -> Result<Vec<Conversation>, CorpusError> {
    let text = read_file(path)?;
    let topics: Vec<CastTopic> =
        serde_json::from_str(&text).map_err(|e| CorpusError::Malformed {
            path: path.display().to_string(),
            location: Location::Line(e.line()),
            detail: e.to_string(),
        })?;
    topics
        .into_iter()
        .enumerate()
        .map(|(i, topic)| {
            let id = topic.number.into_string();
            let turns = topic
                .turn
                .into_iter()
                .map(|t| Turn {
                    user_utterance: t.raw_utterance,
                    system_response: None,
                    gold_rewrite: t.manual_rewritten_utterance,
                })
                .collect();
            validate_turns(path, Location::Record(i + 1), &id, turns)
        })
        .collect()
}

fn load_taskmaster_like(path: &Path) -> Result<Vec<Conversation>, CorpusError> {
    let text = read_file(path)?;
    let raw: Vec<TaskmasterConversation> =
        serde_json::from_str(&text).map_err(|e| CorpusError::Malformed {
            path: path.display().to_string(),
            location: Location::Line(e.line()),
            detail: e.to_string(),
        })?;
    raw.into_iter()
        .enumerate()
        .map(|(i, conv)| {
            let location = Location::Record(i + 1);
            let mut turns: Vec<Turn> = Vec::new();
            for utt in conv.utterances {
                let speaker = utt.speaker.to_ascii_lowercase();
                match speaker.as_str() {
                    "user" => turns.push(Turn {
                        user_utterance: utt.text,
                        system_response: None,
                        gold_rewrite: None,
                    }),
                    "assistant" | "system" => {
                        // Replies before the first user utterance have no
                        // query to attach to and are dropped. Consecutive
                        // replies are merged into one response.
                        if let Some(last) = turns.last_mut() {
                            match &mut last.system_response {
                                Some(existing) => {
                                    existing.push(' ');
                                    existing.push_str(&utt.text);
                                }
                                None => last.system_response = Some(utt.text),
                            }
                        }
                    }
                    other => {
                        return Err(CorpusError::Malformed {
                            path: path.display().to_string(),
                            location,
                            detail: format!("field \"speaker\" has unknown value \"{other}\""),
                        });
                    }
                }
            }
            validate_turns(path, location, &conv.conversation_id, turns)
        })
        .collect()
}

/// Writes conversations back out in the canonical JSONL format.
pub fn save_conversations(conversations: &[Conversation], path: &Path) -> Result<(), CorpusError> {
    let mut out = String::new();
    for conv in conversations {
        let record = ConversationRecord {
            id: conv.id.clone(),
            turns: conv
                .turns
                .iter()
                .map(|t| TurnRecord {
                    user: t.user_utterance.clone(),
                    system: t.system_response.clone(),
                    rewrite: t.gold_rewrite.clone(),
                    category: None,
                })
                .collect(),
        };
        out.push_str(&serde_json::to_string(&record).expect("conversation record serializes"));
        out.push('\n');
    }
    fs::write(path, out).map_err(|source| CorpusError::Write {
        path: path.display().to_string(),
        source,
    })
}

/// Expands a conversation into one instance per turn. Turn n's history is
/// every turn strictly before it, so turn 1 gets an empty history.
pub fn make_instances(conversation: &Conversation) -> Vec<RewriteInstance> {
    (1..=conversation.turns.len())
        .map(|n| RewriteInstance {
            conversation_id: conversation.id.clone(),
            turn_index: n,
            history: conversation.turns[..n - 1].to_vec(),
            current_query: conversation.turns[n - 1].user_utterance.clone(),
            gold_rewrite: conversation.turns[n - 1].gold_rewrite.clone(),
            elliptical: None,
        })
        .collect()
}

/// Loads whitespace-separated qrels with rows
/// `<instance_key> <reserved> <doc_id> <grade>`. Blank lines and lines
/// starting with `#` are skipped; a later row for the same pair overwrites an
/// earlier one.
pub fn load_qrels(path: &Path) -> Result<Qrels, CorpusError> {
    let text = read_file(path)?;
    let mut qrels = Qrels::default();
    for (idx, line) in text.lines().enumerate() {
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let malformed = |detail: String| CorpusError::Malformed {
            path: path.display().to_string(),
            location: Location::Line(idx + 1),
            detail,
        };
        let cols: Vec<&str> = trimmed.split_whitespace().collect();
        if cols.len() != 4 {
            return Err(malformed(format!("expected 4 columns, found {}", cols.len())));
        }
        let grade: i64 = cols[3]
            .parse()
            .map_err(|_| malformed(format!("field \"grade\" is not an integer: \"{}\"", cols[3])))?;
        if grade < 0 {
            return Err(malformed(format!("field \"grade\" must be >= 0, found {grade}")));
        }
        qrels.insert(cols[0], cols[2], grade as u32);
    }
    Ok(qrels)
}

/// Loads two-column ellipticity annotations:
/// `<instance_key> <elliptical|non_elliptical>`. Blank lines and `#` comments
/// are skipped.
pub fn load_annotations(path: &Path) -> Result<HashMap<String, bool>, CorpusError> {
    let text = read_file(path)?;
    let mut annotations = HashMap::new();
    for (idx, line) in text.lines().enumerate() {
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = trimmed.split_whitespace().collect();
        if cols.len() != 2 {
            return Err(CorpusError::Malformed {
                path: path.display().to_string(),
                location: Location::Line(idx + 1),
                detail: format!("expected 2 columns, found {}", cols.len()),
            });
        }
        let flag = match cols[1] {
            "elliptical" => true,
            "non_elliptical" => false,
            other => {
                return Err(CorpusError::UnknownLabel {
                    path: path.display().to_string(),
                    line: idx + 1,
                    label: other.to_string(),
                })
            }
        };
        annotations.insert(cols[0].to_string(), flag);
    }
    Ok(annotations)
}

/// Applies annotations to instances by key. Annotation keys that match no
/// instance are logged as warnings and returned (sorted) so callers can
/// report them; they never fail the run.
pub fn apply_annotations(
    instances: &mut [RewriteInstance],
    annotations: &HashMap<String, bool>,
) -> Vec<String> {
    let mut matched = HashSet::new();
    for instance in instances.iter_mut() {
        let key = instance.key();
        if let Some(flag) = annotations.get(&key) {
            instance.elliptical = Some(*flag);
            matched.insert(key);
        }
    }
    let mut unmatched: Vec<String> = annotations
        .keys()
        .filter(|k| !matched.contains(*k))
        .cloned()
        .collect();
    unmatched.sort();
    for key in &unmatched {
        log::warn!("annotation key {key} matches no instance");
    }
    unmatched
}

/// Loads a JSONL document collection with `{"doc_id": ..., "body": ...}`
/// records. Doc ids must be non-empty and unique.
pub fn load_documents(path: &Path) -> Result<Vec<Document>, CorpusError> {
    let text = read_file(path)?;
    let mut docs = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let doc: Document = serde_json::from_str(line).map_err(|e| CorpusError::Malformed {
            path: path.display().to_string(),
            location: Location::Line(idx + 1),
            detail: e.to_string(),
        })?;
        if doc.doc_id.trim().is_empty() {
            return Err(CorpusError::Malformed {
                path: path.display().to_string(),
                location: Location::Line(idx + 1),
                detail: "field \"doc_id\" must be non-empty".to_string(),
            });
        }
        if !seen.insert(doc.doc_id.clone()) {
            return Err(CorpusError::DuplicateDocId {
                path: path.display().to_string(),
                id: doc.doc_id,
            });
        }
        docs.push(doc);
    }
    Ok(docs)
}
