//! Experimental cuts and aggregation.
//!
//! This module turns per-instance rewrites into the report shapes the rest
//! of the harness emits: an overall four-metric summary, a shot-count
//! ablation, Success Rate@10 sliced by conversation depth and by
//! ellipticity, and a blinded pairwise export for human judging. The
//! [`Pipeline`] type owns one configured pass over a dataset (prompt spec,
//! rewriter, BM25 index, qrels) and keeps every stage seeded so repeated
//! runs are byte-identical.

use std::collections::BTreeMap;
use std::time::{SystemTime, UNIX_EPOCH};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Qrels, RewriteInstance, TurnRecord};
use crate::llm::{BatchError, Rewriter};
use crate::metrics::{bleu4, rouge_l, tokenize};
use crate::prompt::{ExampleTriple, PromptError, PromptSpec, SelectionStrategy};
use crate::retrieval::{reciprocal_rank, search, success_at_k, Index};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("turn index must be >= 1")]
    InvalidTurnIndex,
    #[error("no instances")]
    NoInstances,
    #[error("empty ablation")]
    EmptyAblation,
    #[error("misaligned inputs: {expected} instances but {found} rewrites")]
    Misaligned { expected: usize, found: usize },
    #[error("sample size {requested} exceeds population {population}")]
    SampleTooLarge { requested: usize, population: usize },
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Batch(#[from] BatchError),
}

/// Conversation-depth bucket of a turn index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TurnBucket {
    Early,
    Mid,
    Late,
}

impl TurnBucket {
    pub fn label(self) -> &'static str {
        match self {
            TurnBucket::Early => "Early Turns (1-3)",
            TurnBucket::Mid => "Mid Turns (4-6)",
            TurnBucket::Late => "Late Turns (7+)",
        }
    }
}

/// Buckets a 1-based turn index: 1-3 early, 4-6 mid, 7 and deeper late.
pub fn bucket_of(turn_index: usize) -> Result<TurnBucket, AnalysisError> {
    match turn_index {
        0 => Err(AnalysisError::InvalidTurnIndex),
        1..=3 => Ok(TurnBucket::Early),
        4..=6 => Ok(TurnBucket::Mid),
        _ => Ok(TurnBucket::Late),
    }
}

/// Ellipticity class of an annotated instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EllipticityClass {
    Elliptical,
    NonElliptical,
}

impl EllipticityClass {
    pub fn label(self) -> &'static str {
        match self {
            EllipticityClass::Elliptical => "Elliptical",
            EllipticityClass::NonElliptical => "Non-Elliptical",
        }
    }
}

/// Partitions instances by their annotation flag. Unannotated instances go
/// to the third list and are excluded from ellipticity reporting.
pub fn split_by_ellipticity(
    instances: &[RewriteInstance],
) -> (
    Vec<&RewriteInstance>,
    Vec<&RewriteInstance>,
    Vec<&RewriteInstance>,
) {
    let mut elliptical = Vec::new();
    let mut non_elliptical = Vec::new();
    let mut unannotated = Vec::new();
    for instance in instances {
        match instance.elliptical {
            Some(true) => elliptical.push(instance),
            Some(false) => non_elliptical.push(instance),
            None => unannotated.push(instance),
        }
    }
    (elliptical, non_elliptical, unannotated)
}

const ELLIPTICAL_PRONOUNS: [&str; 13] = [
    "it", "its", "they", "them", "their", "he", "she", "his", "her", "this", "that", "these",
    "those",
];

/// Approximate ellipticity test: a query is flagged when it contains a
/// third-person pronoun or is at most three tokens long. This is a rough
/// stand-in for manual annotation and every output that uses it says so.
pub fn heuristic_ellipticity(query: &str) -> bool {
    let tokens = tokenize(query);
    tokens.len() <= 3
        || tokens
            .tokens
            .iter()
            .any(|t| ELLIPTICAL_PRONOUNS.contains(&t.as_str()))
}

/// All four metrics over one set of instances.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverallScores {
    pub bleu4: f64,
    pub rouge_l: f64,
    pub success_at_10: f64,
    pub mrr: f64,
}

/// Success Rate@10 over one slice, with the slice size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BucketStat {
    pub count: usize,
    pub success_at_10: f64,
}

/// Where the ellipticity flags came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EllipticitySource {
    Annotations,
    /// Flags filled in by [`heuristic_ellipticity`]; approximate.
    Heuristic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub backend_id: String,
    pub seed: u64,
    pub dataset_id: String,
    pub ellipticity_source: EllipticitySource,
    /// Wall-clock start of the run, unix seconds. Deliberately excluded
    /// from serialized artifacts (it is logged instead) so repeated runs
    /// stay byte-identical.
    #[serde(skip)]
    pub timestamp: Option<u64>,
}

impl RunMetadata {
    pub fn new(backend_id: &str, seed: u64, dataset_id: &str) -> RunMetadata {
        let timestamp = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .ok();
        RunMetadata {
            backend_id: backend_id.to_string(),
            seed,
            dataset_id: dataset_id.to_string(),
            ellipticity_source: EllipticitySource::Annotations,
            timestamp,
        }
    }
}

/// The full report for one run: overall metrics, the per-shot-count rows
/// (populated by ablations), and the Success Rate@10 breakdowns. Bucket
/// maps contain only slices with at least one instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub overall: OverallScores,
    pub by_shots: BTreeMap<usize, OverallScores>,
    pub by_turn_bucket: BTreeMap<TurnBucket, BucketStat>,
    pub by_ellipticity: BTreeMap<EllipticityClass, BucketStat>,
    pub unannotated_count: usize,
    pub run_metadata: RunMetadata,
}

/// Everything measured about one rewritten instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceScore {
    pub instance_key: String,
    pub turn_index: usize,
    pub elliptical: Option<bool>,
    /// None when the instance has no usable gold rewrite.
    pub bleu4: Option<f64>,
    pub rouge_l: Option<f64>,
    pub success_at_k: u8,
    pub reciprocal_rank: f64,
}

/// Scores one rewrite per instance: overlap against the gold rewrite when
/// one exists, and retrieval quality of the rewrite as a BM25 query.
/// `rewrites[i]` must correspond to `instances[i]`.
pub fn score_rewrites(
    instances: &[RewriteInstance],
    rewrites: &[String],
    index: &Index,
    qrels: &Qrels,
    success_k: usize,
) -> Result<Vec<InstanceScore>, AnalysisError> {
    if instances.len() != rewrites.len() {
        return Err(AnalysisError::Misaligned {
            expected: instances.len(),
            found: rewrites.len(),
        });
    }
    let mut scores = Vec::with_capacity(instances.len());
    for (instance, rewrite) in instances.iter().zip(rewrites) {
        let key = instance.key();
        let candidate = tokenize(rewrite);
        let (bleu, rouge) = match &instance.gold_rewrite {
            Some(gold) => {
                let reference = tokenize(gold);
                if reference.is_empty() {
                    log::warn!("instance {key}: gold rewrite tokenizes to nothing; skipping overlap metrics");
                    (None, None)
                } else {
                    let b = bleu4(&candidate, &reference).expect("reference checked non-empty");
                    let r = rouge_l(&candidate, &reference).expect("reference checked non-empty");
                    (Some(b), Some(r))
                }
            }
            None => (None, None),
        };
        let ranked = search(index, rewrite, success_k);
        scores.push(InstanceScore {
            instance_key: key.clone(),
            turn_index: instance.turn_index,
            elliptical: instance.elliptical,
            bleu4: bleu,
            rouge_l: rouge,
            success_at_k: success_at_k(&ranked, qrels, &key, success_k),
            reciprocal_rank: reciprocal_rank(&ranked, qrels, &key),
        });
    }
    Ok(scores)
}

/// Aggregates per-instance scores into a [`MetricReport`].
///
/// BLEU-4 and ROUGE-L average over instances that have gold rewrites (0.0
/// when none do); Success Rate@10 and MRR average over all instances, with
/// retrieval misses and unjudged instances contributing 0. The turn-bucket
/// breakdown covers every instance; the ellipticity breakdown covers only
/// annotated ones. `shot_count` labels the run's row in `by_shots`.
pub fn aggregate(
    scores: &[InstanceScore],
    shot_count: Option<usize>,
    run_metadata: RunMetadata,
) -> Result<MetricReport, AnalysisError> {
    if scores.is_empty() {
        return Err(AnalysisError::NoInstances);
    }
    let overall = overall_of(scores);
    let mut by_shots = BTreeMap::new();
    if let Some(k) = shot_count {
        by_shots.insert(k, overall);
    }

    let mut bucket_groups: BTreeMap<TurnBucket, Vec<&InstanceScore>> = BTreeMap::new();
    for score in scores {
        bucket_groups
            .entry(bucket_of(score.turn_index)?)
            .or_default()
            .push(score);
    }
    let by_turn_bucket = bucket_groups
        .into_iter()
        .map(|(bucket, group)| (bucket, bucket_stat(&group)))
        .collect();

    let mut ellipticity_groups: BTreeMap<EllipticityClass, Vec<&InstanceScore>> = BTreeMap::new();
    let mut unannotated_count = 0;
    for score in scores {
        match score.elliptical {
            Some(true) => ellipticity_groups
                .entry(EllipticityClass::Elliptical)
                .or_default()
                .push(score),
            Some(false) => ellipticity_groups
                .entry(EllipticityClass::NonElliptical)
                .or_default()
                .push(score),
            None => unannotated_count += 1,
        }
    }
    let by_ellipticity = ellipticity_groups
        .into_iter()
        .map(|(class, group)| (class, bucket_stat(&group)))
        .collect();

    Ok(MetricReport {
        overall,
        by_shots,
        by_turn_bucket,
        by_ellipticity,
        unannotated_count,
        run_metadata,
    })
}

fn overall_of(scores: &[InstanceScore]) -> OverallScores {
    let n = scores.len() as f64;
    let golds: Vec<(f64, f64)> = scores
        .iter()
        .filter_map(|s| s.bleu4.zip(s.rouge_l))
        .collect();
    let (bleu, rouge) = if golds.is_empty() {
        log::warn!("no instance has a gold rewrite; BLEU-4 and ROUGE-L report 0");
        (0.0, 0.0)
    } else {
        let g = golds.len() as f64;
        (
            golds.iter().map(|(b, _)| b).sum::<f64>() / g,
            golds.iter().map(|(_, r)| r).sum::<f64>() / g,
        )
    };
    OverallScores {
        bleu4: bleu,
        rouge_l: rouge,
        success_at_10: scores.iter().map(|s| f64::from(s.success_at_k)).sum::<f64>() / n,
        mrr: scores.iter().map(|s| s.reciprocal_rank).sum::<f64>() / n,
    }
}

fn bucket_stat(group: &[&InstanceScore]) -> BucketStat {
    BucketStat {
        count: group.len(),
        success_at_10: group.iter().map(|s| f64::from(s.success_at_k)).sum::<f64>()
            / group.len() as f64,
    }
}

/// One generated rewrite, as persisted to the rewrites file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewriteRow {
    pub instance_key: String,
    pub rewrite: String,
    pub backend_id: String,
    pub from_cache: bool,
}

/// The output of one full pass at a fixed shot count.
#[derive(Debug)]
pub struct EvalRun {
    pub shot_count: usize,
    pub rows: Vec<RewriteRow>,
    pub scores: Vec<InstanceScore>,
    pub report: MetricReport,
}

/// Settings shared by every run of a [`Pipeline`].
#[derive(Debug, Clone)]
pub struct PipelineSettings {
    pub dataset_id: String,
    pub task_definition: String,
    pub format_note: String,
    pub selection: SelectionStrategy,
    pub history_budget: usize,
    pub seed: u64,
    pub success_k: usize,
    pub parallelism: usize,
}

impl Default for PipelineSettings {
    fn default() -> PipelineSettings {
        PipelineSettings {
            dataset_id: "unnamed".to_string(),
            task_definition: crate::prompt::default_task_definition().to_string(),
            format_note: crate::prompt::default_format_note().to_string(),
            selection: SelectionStrategy::FirstK,
            history_budget: 4000,
            seed: 0,
            success_k: 10,
            parallelism: 1,
        }
    }
}

/// A configured end-to-end pass: instances in, rewrites and reports out.
pub struct Pipeline {
    settings: PipelineSettings,
    instances: Vec<RewriteInstance>,
    example_pool: Vec<ExampleTriple>,
    rewriter: Rewriter,
    index: Index,
    qrels: Qrels,
}

impl Pipeline {
    pub fn new(
        settings: PipelineSettings,
        instances: Vec<RewriteInstance>,
        example_pool: Vec<ExampleTriple>,
        rewriter: Rewriter,
        index: Index,
        qrels: Qrels,
    ) -> Result<Pipeline, AnalysisError> {
        if instances.is_empty() {
            return Err(AnalysisError::NoInstances);
        }
        Ok(Pipeline {
            settings,
            instances,
            example_pool,
            rewriter,
            index,
            qrels,
        })
    }

    pub fn settings(&self) -> &PipelineSettings {
        &self.settings
    }

    pub fn instances(&self) -> &[RewriteInstance] {
        &self.instances
    }

    pub fn rewriter(&self) -> &Rewriter {
        &self.rewriter
    }

    pub fn prompt_spec(&self, shot_count: usize) -> PromptSpec {
        PromptSpec {
            task_definition: self.settings.task_definition.clone(),
            format_note: self.settings.format_note.clone(),
            example_pool: self.example_pool.clone(),
            shot_count,
            selection: self.settings.selection,
            seed: self.settings.seed,
            history_budget: self.settings.history_budget,
        }
    }

    /// Renders prompts and generates one rewrite per instance, in instance
    /// order.
    pub fn generate(&self, shot_count: usize) -> Result<Vec<RewriteRow>, AnalysisError> {
        let spec = self.prompt_spec(shot_count);
        let prompts = self
            .instances
            .iter()
            .map(|instance| crate::prompt::build_prompt(&spec, instance))
            .collect::<Result<Vec<_>, _>>()?;
        let results = self
            .rewriter
            .batch_rewrite(&prompts, self.settings.parallelism, true)?;
        Ok(self
            .instances
            .iter()
            .zip(results)
            .map(|(instance, result)| RewriteRow {
                instance_key: instance.key(),
                rewrite: result.rewrite,
                backend_id: result.backend_id,
                from_cache: result.from_cache,
            })
            .collect())
    }

    /// Scores externally supplied rewrites (aligned with `instances()`).
    pub fn evaluate_rewrites(
        &self,
        rewrites: &[String],
        shot_count: Option<usize>,
    ) -> Result<(Vec<InstanceScore>, MetricReport), AnalysisError> {
        let scores = score_rewrites(
            &self.instances,
            rewrites,
            &self.index,
            &self.qrels,
            self.settings.success_k,
        )?;
        let metadata = RunMetadata::new(
            self.rewriter.backend_id(),
            self.settings.seed,
            &self.settings.dataset_id,
        );
        if let Some(ts) = metadata.timestamp {
            log::info!(
                "evaluating {} instances with backend {} (unix {ts})",
                self.instances.len(),
                metadata.backend_id
            );
        }
        let report = aggregate(&scores, shot_count, metadata)?;
        Ok((scores, report))
    }

    /// Generates and scores in one pass.
    pub fn run(&self, shot_count: usize) -> Result<EvalRun, AnalysisError> {
        let rows = self.generate(shot_count)?;
        let rewrites: Vec<String> = rows.iter().map(|r| r.rewrite.clone()).collect();
        let (scores, report) = self.evaluate_rewrites(&rewrites, Some(shot_count))?;
        Ok(EvalRun {
            shot_count,
            rows,
            scores,
            report,
        })
    }

    /// One full evaluation per shot count, everything else held fixed. The
    /// rewriter (and its cache) is shared across the per-k runs.
    pub fn run_ablation(
        &self,
        shot_counts: &[usize],
    ) -> Result<BTreeMap<usize, EvalRun>, AnalysisError> {
        if shot_counts.is_empty() {
            return Err(AnalysisError::EmptyAblation);
        }
        let mut runs = BTreeMap::new();
        for &k in shot_counts {
            runs.insert(k, self.run(k)?);
        }
        Ok(runs)
    }
}

/// Judge-facing pairwise item: two anonymous rewrites for one instance.
/// Which side is which system lives only in the matching [`PairwiseKey`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PairwiseItem {
    pub item_id: String,
    pub history: Vec<TurnRecord>,
    pub query: String,
    pub rewrite_a: String,
    pub rewrite_b: String,
}

/// The hidden assignment for one pairwise item.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PairwiseKey {
    pub item_id: String,
    pub instance_key: String,
    pub system_a: String,
    pub system_b: String,
}

/// Samples `sample_size` instances without replacement under the seed and
/// emits blinded comparison items, flipping which system lands on side "a"
/// per item. The first returned list is safe to hand to judges; the second
/// is the answer key and must be stored separately.
#[allow(clippy::too_many_arguments)]
pub fn export_pairwise(
    instances: &[RewriteInstance],
    rewrites_a: &[String],
    system_a: &str,
    rewrites_b: &[String],
    system_b: &str,
    sample_size: usize,
    seed: u64,
) -> Result<(Vec<PairwiseItem>, Vec<PairwiseKey>), AnalysisError> {
    if instances.len() != rewrites_a.len() {
        return Err(AnalysisError::Misaligned {
            expected: instances.len(),
            found: rewrites_a.len(),
        });
    }
    if instances.len() != rewrites_b.len() {
        return Err(AnalysisError::Misaligned {
            expected: instances.len(),
            found: rewrites_b.len(),
        });
    }
    if sample_size > instances.len() {
        return Err(AnalysisError::SampleTooLarge {
            requested: sample_size,
            population: instances.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picked = rand::seq::index::sample(&mut rng, instances.len(), sample_size);
    let mut items = Vec::with_capacity(sample_size);
    let mut keys = Vec::with_capacity(sample_size);
    for (item_number, index) in picked.iter().enumerate() {
        let instance = &instances[index];
        let item_id = format!("item_{:03}", item_number + 1);
        let flip = rng.gen_bool(0.5);
        let (side_a, side_b, first_system, second_system) = if flip {
            (&rewrites_b[index], &rewrites_a[index], system_b, system_a)
        } else {
            (&rewrites_a[index], &rewrites_b[index], system_a, system_b)
        };
        items.push(PairwiseItem {
            item_id: item_id.clone(),
            history: instance
                .history
                .iter()
                .map(|turn| TurnRecord {
                    user: turn.user_utterance.clone(),
                    system: turn.system_response.clone(),
                    rewrite: None,
                    category: None,
                })
                .collect(),
            query: instance.current_query.clone(),
            rewrite_a: side_a.clone(),
            rewrite_b: side_b.clone(),
        });
        keys.push(PairwiseKey {
            item_id,
            instance_key: instance.key(),
            system_a: first_system.to_string(),
            system_b: second_system.to_string(),
        });
    }
    Ok((items, keys))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Document, Turn};
    use crate::llm::BackendConfig;
    use crate::retrieval::build_index;
    use proptest::prelude::*;

    #[test]
    fn bucket_of_matches_table_boundaries() {
        assert_eq!(bucket_of(1).unwrap(), TurnBucket::Early);
        assert_eq!(bucket_of(2).unwrap(), TurnBucket::Early);
        assert_eq!(bucket_of(3).unwrap(), TurnBucket::Early);
        assert_eq!(bucket_of(4).unwrap(), TurnBucket::Mid);
        assert_eq!(bucket_of(5).unwrap(), TurnBucket::Mid);
        assert_eq!(bucket_of(6).unwrap(), TurnBucket::Mid);
        assert_eq!(bucket_of(7).unwrap(), TurnBucket::Late);
        assert_eq!(bucket_of(9).unwrap(), TurnBucket::Late);
        assert_eq!(bucket_of(12).unwrap(), TurnBucket::Late);
        assert!(matches!(bucket_of(0), Err(AnalysisError::InvalidTurnIndex)));
    }

    #[test]
    fn heuristic_flags_pronouns_and_short_queries() {
        assert!(heuristic_ellipticity("What is its population?"));
        assert!(!heuristic_ellipticity("What is the population of Paris?"));
        assert!(heuristic_ellipticity("more info"));
        assert!(heuristic_ellipticity("Why did that happen in the experiment?"));
        assert!(!heuristic_ellipticity("Find restaurants near the main station downtown"));
    }

    fn instance(key_conv: &str, turn_index: usize, elliptical: Option<bool>) -> RewriteInstance {
        RewriteInstance {
            conversation_id: key_conv.to_string(),
            turn_index,
            history: vec![],
            current_query: "q".to_string(),
            gold_rewrite: None,
            elliptical,
        }
    }

    #[test]
    fn split_by_ellipticity_partitions_three_ways() {
        let instances = vec![
            instance("a", 1, Some(true)),
            instance("b", 1, Some(false)),
            instance("c", 1, None),
        ];
        let (e, n, u) = split_by_ellipticity(&instances);
        assert_eq!((e.len(), n.len(), u.len()), (1, 1, 1));
        assert_eq!(e[0].conversation_id, "a");

        let all_true = vec![instance("a", 1, Some(true)), instance("b", 2, Some(true))];
        let (e, n, u) = split_by_ellipticity(&all_true);
        assert_eq!((e.len(), n.len(), u.len()), (2, 0, 0));

        let (e, n, u) = split_by_ellipticity(&[]);
        assert_eq!((e.len(), n.len(), u.len()), (0, 0, 0));
    }

    fn score(key: &str, turn_index: usize, success: u8, elliptical: Option<bool>) -> InstanceScore {
        InstanceScore {
            instance_key: key.to_string(),
            turn_index,
            elliptical,
            bleu4: None,
            rouge_l: None,
            success_at_k: success,
            reciprocal_rank: f64::from(success),
        }
    }

    fn metadata() -> RunMetadata {
        RunMetadata::new("identity", 7, "test")
    }

    #[test]
    fn aggregate_means_success_over_all_instances() {
        let scores = vec![score("a_1", 1, 1, None), score("b_1", 1, 0, None)];
        let report = aggregate(&scores, None, metadata()).unwrap();
        assert_eq!(report.overall.success_at_10, 0.5);
        assert!(report.by_shots.is_empty());
        assert_eq!(report.unannotated_count, 2);
        assert!(report.by_ellipticity.is_empty());
    }

    #[test]
    fn aggregate_buckets_by_turn_and_skips_empty_buckets() {
        let scores = vec![score("a_2", 2, 1, None), score("a_5", 5, 0, None)];
        let report = aggregate(&scores, Some(5), metadata()).unwrap();
        assert_eq!(report.by_turn_bucket.len(), 2);
        assert_eq!(report.by_turn_bucket[&TurnBucket::Early].success_at_10, 1.0);
        assert_eq!(report.by_turn_bucket[&TurnBucket::Early].count, 1);
        assert_eq!(report.by_turn_bucket[&TurnBucket::Mid].success_at_10, 0.0);
        assert!(!report.by_turn_bucket.contains_key(&TurnBucket::Late));
        assert_eq!(report.by_shots.len(), 1);
        assert_eq!(report.by_shots[&5], report.overall);
    }

    #[test]
    fn aggregate_excludes_unannotated_from_ellipticity() {
        let scores = vec![score("a_1", 1, 1, Some(true)), score("b_1", 1, 0, None)];
        let report = aggregate(&scores, None, metadata()).unwrap();
        assert_eq!(report.by_ellipticity.len(), 1);
        assert_eq!(
            report.by_ellipticity[&EllipticityClass::Elliptical].success_at_10,
            1.0
        );
        assert_eq!(report.unannotated_count, 1);
    }

    #[test]
    fn aggregate_averages_overlap_metrics_over_gold_subset() {
        let mut with_gold = score("a_1", 1, 1, None);
        with_gold.bleu4 = Some(0.5);
        with_gold.rouge_l = Some(0.25);
        let without_gold = score("b_1", 1, 0, None);
        let report = aggregate(&[with_gold, without_gold], None, metadata()).unwrap();
        assert_eq!(report.overall.bleu4, 0.5);
        assert_eq!(report.overall.rouge_l, 0.25);
    }

    #[test]
    fn aggregate_rejects_empty_input() {
        assert!(matches!(
            aggregate(&[], None, metadata()),
            Err(AnalysisError::NoInstances)
        ));
    }

    #[test]
    fn metric_report_serializes_with_string_keys() {
        let scores = vec![score("a_2", 2, 1, Some(true))];
        let report = aggregate(&scores, Some(0), metadata()).unwrap();
        let json = serde_json::to_string(&report).unwrap();
        assert!(json.contains("\"early\""));
        assert!(json.contains("\"elliptical\""));
        assert!(json.contains("\"0\""));
        assert!(!json.contains("timestamp"));
        let back: MetricReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back.overall, report.overall);
    }

    fn gold_instance(conv: &str, turn_index: usize, query: &str, gold: &str) -> RewriteInstance {
        RewriteInstance {
            conversation_id: conv.to_string(),
            turn_index,
            history: vec![Turn {
                user_utterance: "Earlier question about the topic.".to_string(),
                system_response: Some("Earlier answer.".to_string()),
                gold_rewrite: None,
            }],
            current_query: query.to_string(),
            gold_rewrite: Some(gold.to_string()),
            elliptical: Some(true),
        }
    }

    fn tiny_index() -> Index {
        build_index(&[
            Document {
                doc_id: "d1".to_string(),
                body: "paris is the capital of france".to_string(),
            },
            Document {
                doc_id: "d2".to_string(),
                body: "mars is the red planet".to_string(),
            },
        ])
        .unwrap()
    }

    #[test]
    fn score_rewrites_combines_overlap_and_retrieval() {
        let instances = vec![
            gold_instance("c1", 1, "what about it?", "what is the population of paris"),
            gold_instance("c2", 1, "and mars?", "tell me about the planet mars"),
        ];
        let rewrites = vec![
            "what is the population of paris".to_string(),
            "unrelated words entirely".to_string(),
        ];
        let mut qrels = Qrels::default();
        qrels.insert("c1_1", "d1", 1);
        qrels.insert("c2_1", "d2", 2);
        let scores = score_rewrites(&instances, &rewrites, &tiny_index(), &qrels, 10).unwrap();
        assert_eq!(scores[0].bleu4, Some(1.0));
        assert_eq!(scores[0].rouge_l, Some(1.0));
        assert_eq!(scores[0].success_at_k, 1);
        assert_eq!(scores[0].reciprocal_rank, 1.0);
        assert!(scores[1].bleu4.unwrap() < 0.05);
        assert_eq!(scores[1].success_at_k, 0);
        assert_eq!(scores[1].reciprocal_rank, 0.0);
    }

    #[test]
    fn score_rewrites_rejects_misaligned_input() {
        let instances = vec![gold_instance("c1", 1, "q", "g")];
        let err =
            score_rewrites(&instances, &[], &tiny_index(), &Qrels::default(), 10).unwrap_err();
        assert!(matches!(
            err,
            AnalysisError::Misaligned { expected: 1, found: 0 }
        ));
    }

    fn test_pipeline() -> Pipeline {
        let instances = vec![
            gold_instance("c1", 1, "what is the capital of france", "what is the capital of france"),
            gold_instance("c1", 2, "what about mars", "what about the planet mars"),
        ];
        let mut qrels = Qrels::default();
        qrels.insert("c1_1", "d1", 1);
        qrels.insert("c1_2", "d2", 1);
        Pipeline::new(
            PipelineSettings {
                dataset_id: "tiny".to_string(),
                ..PipelineSettings::default()
            },
            instances,
            crate::prompt::default_example_pool(),
            Rewriter::new(BackendConfig::identity()).unwrap(),
            tiny_index(),
            qrels,
        )
        .unwrap()
    }

    #[test]
    fn pipeline_run_produces_aligned_rows_and_scores() {
        let pipeline = test_pipeline();
        let run = pipeline.run(2).unwrap();
        assert_eq!(run.rows.len(), 2);
        assert_eq!(run.scores.len(), 2);
        assert_eq!(run.rows[0].instance_key, "c1_1");
        assert_eq!(run.rows[0].rewrite, "what is the capital of france");
        assert_eq!(run.rows[0].backend_id, "identity");
        assert_eq!(run.report.by_shots.len(), 1);
        assert!(run.report.by_shots.contains_key(&2));
        // Identity rewrites equal the queries; the first query is its own
        // gold, so it scores 1.0 on both overlap metrics.
        assert_eq!(run.scores[0].bleu4, Some(1.0));
    }

    #[test]
    fn pipeline_rejects_empty_instances() {
        let err = Pipeline::new(
            PipelineSettings::default(),
            vec![],
            vec![],
            Rewriter::new(BackendConfig::identity()).unwrap(),
            tiny_index(),
            Qrels::default(),
        )
        .err()
        .unwrap();
        assert!(matches!(err, AnalysisError::NoInstances));
    }

    #[test]
    fn ablation_covers_exactly_the_requested_shot_counts() {
        let pipeline = test_pipeline();
        let runs = pipeline.run_ablation(&[0, 2, 5]).unwrap();
        let keys: Vec<usize> = runs.keys().copied().collect();
        assert_eq!(keys, vec![0, 2, 5]);
        assert!(matches!(
            pipeline.run_ablation(&[]),
            Err(AnalysisError::EmptyAblation)
        ));
        // A single-k ablation equals the direct run.
        let single = pipeline.run_ablation(&[0]).unwrap();
        let direct = pipeline.run(0).unwrap();
        assert_eq!(single[&0].report, direct.report);
    }

    fn pairwise_fixture() -> (Vec<RewriteInstance>, Vec<String>, Vec<String>) {
        let instances: Vec<RewriteInstance> = (0..10)
            .map(|i| gold_instance("conv", i + 1, &format!("query {i}"), "gold"))
            .collect();
        let rewrites_a: Vec<String> = (0..10).map(|i| format!("alpha rewrite {i}")).collect();
        let rewrites_b: Vec<String> = (0..10).map(|i| format!("beta rewrite {i}")).collect();
        (instances, rewrites_a, rewrites_b)
    }

    #[test]
    fn export_pairwise_is_deterministic_and_blinded() {
        let (instances, rewrites_a, rewrites_b) = pairwise_fixture();
        let (items1, keys1) =
            export_pairwise(&instances, &rewrites_a, "sysA", &rewrites_b, "sysB", 6, 13).unwrap();
        let (items2, keys2) =
            export_pairwise(&instances, &rewrites_a, "sysA", &rewrites_b, "sysB", 6, 13).unwrap();
        assert_eq!(items1, items2);
        assert_eq!(keys1, keys2);
        assert_eq!(items1.len(), 6);
        assert_eq!(items1[0].item_id, "item_001");

        for (item, key) in items1.iter().zip(&keys1) {
            assert_eq!(item.item_id, key.item_id);
            // The key reconstructs which side came from which system.
            let expect_a = if key.system_a == "sysA" { "alpha" } else { "beta" };
            assert!(item.rewrite_a.starts_with(expect_a));
            // The judge-facing item leaks no system identity.
            let json = serde_json::to_string(item).unwrap();
            assert!(!json.contains("sysA") && !json.contains("sysB"));
            assert!(!json.contains("instance_key"));
        }

        // Some item must be flipped and some not, under this seed and size.
        let sides: Vec<&str> = keys1.iter().map(|k| k.system_a.as_str()).collect();
        assert!(sides.contains(&"sysA") && sides.contains(&"sysB"));
    }

    #[test]
    fn export_pairwise_validates_sizes() {
        let (instances, rewrites_a, rewrites_b) = pairwise_fixture();
        assert!(matches!(
            export_pairwise(&instances, &rewrites_a, "a", &rewrites_b, "b", 11, 1),
            Err(AnalysisError::SampleTooLarge { requested: 11, population: 10 })
        ));
        let (items, keys) =
            export_pairwise(&instances, &rewrites_a, "a", &rewrites_b, "b", 0, 1).unwrap();
        assert!(items.is_empty() && keys.is_empty());
        assert!(matches!(
            export_pairwise(&instances, &rewrites_a[..5], "a", &rewrites_b, "b", 2, 1),
            Err(AnalysisError::Misaligned { .. })
        ));
    }

    proptest! {
        #[test]
        fn weighted_bucket_means_recombine_to_overall(
            successes in prop::collection::vec((1usize..15, 0u8..2), 1..40),
        ) {
            let scores: Vec<InstanceScore> = successes
                .iter()
                .enumerate()
                .map(|(i, (turn, s))| score(&format!("c_{i}"), *turn, *s, None))
                .collect();
            let report = aggregate(&scores, None, metadata()).unwrap();
            let recombined: f64 = report
                .by_turn_bucket
                .values()
                .map(|stat| stat.success_at_10 * stat.count as f64)
                .sum::<f64>()
                / scores.len() as f64;
            prop_assert!((recombined - report.overall.success_at_10).abs() <= 1e-12);
            let total: usize = report.by_turn_bucket.values().map(|s| s.count).sum();
            prop_assert_eq!(total, scores.len());
        }

        #[test]
        fn export_pairwise_random_assignment_is_seed_stable(
            seed in 0u64..500,
            sample in 0usize..10,
        ) {
            let (instances, rewrites_a, rewrites_b) = pairwise_fixture();
            let (_, keys1) = export_pairwise(
                &instances, &rewrites_a, "a", &rewrites_b, "b", sample, seed,
            ).unwrap();
            let (_, keys2) = export_pairwise(
                &instances, &rewrites_a, "a", &rewrites_b, "b", sample, seed,
            ).unwrap();
            prop_assert_eq!(keys1, keys2);
        }
    }
}
