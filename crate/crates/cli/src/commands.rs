//! Subcommand implementations. Each command loads what it needs through the
//! validated [`Config`], runs one pipeline stage, and writes its artifacts
//! under the output directory. All artifact bytes are deterministic for
//! offline backends: rows follow instance order, maps are ordered, and no
//! timestamps are serialized.

use std::collections::BTreeMap;
use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};

use cqr_core::analysis::{
    aggregate, export_pairwise, heuristic_ellipticity, EllipticitySource, MetricReport, Pipeline,
    PipelineSettings, RewriteRow, RunMetadata,
};
use cqr_core::corpus::{
    apply_annotations, load_annotations, load_conversations, load_documents, load_qrels,
    make_instances, Document, Qrels, RewriteInstance,
};
use cqr_core::llm::Rewriter;
use cqr_core::prompt::{
    default_example_pool, default_format_note, default_task_definition, load_example_pool,
    ExampleTriple,
};
use cqr_core::report::{
    parse_scores_tsv, render_ablation_text, render_report_text, render_scores_tsv, ScoresHeader,
};
use cqr_core::retrieval::{build_index, Index};

use crate::config::{Config, Overrides};

/// Failure classes, mapped to exit codes by `main`.
#[derive(Debug)]
pub enum CliError {
    /// Configuration or input-contract violations; exit code 1.
    Validation(Vec<String>),
    /// Everything that breaks after validation passed; exit code 2.
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(e)
    }
}

/// How ellipticity flags are filled before aggregation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EllipticityMode {
    /// Use the annotation file when configured; unannotated instances stay
    /// unlabeled and are excluded from the ellipticity table.
    Annotations,
    /// Label every instance with the lexical heuristic, ignoring the
    /// annotation file.
    Heuristic,
}

/// Everything the corpus side of a run provides.
pub struct LoadedData {
    pub instances: Vec<RewriteInstance>,
    pub example_pool: Vec<ExampleTriple>,
    pub qrels: Qrels,
    pub documents: Vec<Document>,
}

pub fn load_data(config: &Config, mode: EllipticityMode) -> anyhow::Result<LoadedData> {
    let conversations = load_conversations(&config.conversations, config.format)
        .with_context(|| format!("loading {}", config.conversations.display()))?;
    let mut instances: Vec<RewriteInstance> =
        conversations.iter().flat_map(|c| make_instances(c)).collect();

    match mode {
        EllipticityMode::Annotations => {
            if let Some(path) = &config.annotations {
                let annotations = load_annotations(path)
                    .with_context(|| format!("loading {}", path.display()))?;
                apply_annotations(&mut instances, &annotations);
            }
        }
        EllipticityMode::Heuristic => {
            for instance in &mut instances {
                instance.elliptical = Some(heuristic_ellipticity(&instance.current_query));
            }
        }
    }

    let example_pool = match &config.example_pool {
        Some(path) => {
            load_example_pool(path).with_context(|| format!("loading {}", path.display()))?
        }
        None => default_example_pool(),
    };
    let qrels =
        load_qrels(&config.qrels).with_context(|| format!("loading {}", config.qrels.display()))?;
    let documents = load_documents(&config.documents)
        .with_context(|| format!("loading {}", config.documents.display()))?;

    Ok(LoadedData {
        instances,
        example_pool,
        qrels,
        documents,
    })
}

fn settings_from(config: &Config) -> PipelineSettings {
    PipelineSettings {
        dataset_id: config.dataset_id.clone(),
        task_definition: config
            .task_definition
            .clone()
            .unwrap_or_else(|| default_task_definition().to_string()),
        format_note: config
            .format_note
            .clone()
            .unwrap_or_else(|| default_format_note().to_string()),
        selection: config.selection,
        history_budget: config.history_budget,
        seed: config.seed,
        success_k: config.success_k,
        parallelism: config.parallelism,
    }
}

fn build_index_for(documents: &[Document]) -> anyhow::Result<Index> {
    build_index(documents).context("building the retrieval index")
}

fn build_pipeline(config: &Config, data: LoadedData) -> anyhow::Result<Pipeline> {
    let index = build_index_for(&data.documents)?;
    let rewriter = Rewriter::new(config.backend.clone()).context("constructing the backend")?;
    Pipeline::new(
        settings_from(config),
        data.instances,
        data.example_pool,
        rewriter,
        index,
        data.qrels,
    )
    .context("assembling the pipeline")
}

fn write_string(path: &Path, contents: &str) -> anyhow::Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)
            .with_context(|| format!("creating directory {}", parent.display()))?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn write_jsonl<T: serde::Serialize>(path: &Path, rows: &[T]) -> anyhow::Result<()> {
    let mut out = String::new();
    for row in rows {
        out.push_str(&serde_json::to_string(row).context("serializing a row")?);
        out.push('\n');
    }
    write_string(path, &out)
}

fn report_json(report: &MetricReport) -> anyhow::Result<String> {
    let mut text = serde_json::to_string_pretty(report).context("serializing the report")?;
    text.push('\n');
    Ok(text)
}

fn read_rewrite_rows(path: &Path) -> anyhow::Result<Vec<RewriteRow>> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut rows = Vec::new();
    for (number, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: RewriteRow = serde_json::from_str(line)
            .with_context(|| format!("{}: line {}", path.display(), number + 1))?;
        rows.push(row);
    }
    Ok(rows)
}

/// Orders the file's rewrites by instance, rejecting duplicates, orphan keys,
/// and gaps.
fn align_rewrites(
    instances: &[RewriteInstance],
    rows: &[RewriteRow],
    source: &Path,
) -> anyhow::Result<Vec<String>> {
    let mut by_key: HashMap<String, &RewriteRow> = HashMap::with_capacity(rows.len());
    for row in rows {
        if by_key.insert(row.instance_key.clone(), row).is_some() {
            bail!(
                "{}: duplicate instance_key \"{}\"",
                source.display(),
                row.instance_key
            );
        }
    }
    let mut rewrites = Vec::with_capacity(instances.len());
    let mut missing = Vec::new();
    for instance in instances {
        match by_key.remove(&instance.key()) {
            Some(row) => rewrites.push(row.rewrite.clone()),
            None => missing.push(instance.key()),
        }
    }
    if !by_key.is_empty() {
        let mut orphans: Vec<String> = by_key.into_keys().collect();
        orphans.sort();
        bail!(
            "{}: orphan instance_key(s) not in the dataset: {}",
            source.display(),
            orphans.join(", ")
        );
    }
    if !missing.is_empty() {
        bail!(
            "{}: missing rewrites for {} instance(s): {}",
            source.display(),
            missing.len(),
            preview(&missing)
        );
    }
    Ok(rewrites)
}

fn preview(keys: &[String]) -> String {
    const SHOWN: usize = 5;
    if keys.len() <= SHOWN {
        keys.join(", ")
    } else {
        format!("{}, ...", keys[..SHOWN].join(", "))
    }
}

fn uniform_backend_id(rows: &[RewriteRow]) -> Option<String> {
    let first = rows.first()?;
    rows.iter()
        .all(|r| r.backend_id == first.backend_id)
        .then(|| first.backend_id.clone())
}

pub fn cmd_validate(path: &Path, overrides: &Overrides) -> Result<(), CliError> {
    let config = crate::config::load_config(path, overrides).map_err(CliError::Validation)?;
    let mut violations = Vec::new();

    let conversations = match load_conversations(&config.conversations, config.format) {
        Ok(c) => c,
        Err(e) => {
            violations.push(format!("dataset.conversations: {e}"));
            Vec::new()
        }
    };
    let mut instances: Vec<RewriteInstance> =
        conversations.iter().flat_map(|c| make_instances(c)).collect();

    let mut annotated = 0;
    let mut unmatched = Vec::new();
    if let Some(annotation_path) = &config.annotations {
        match load_annotations(annotation_path) {
            Ok(annotations) => {
                unmatched = apply_annotations(&mut instances, &annotations);
                annotated = instances.iter().filter(|i| i.elliptical.is_some()).count();
            }
            Err(e) => violations.push(format!("dataset.annotations: {e}")),
        }
    }

    let qrels = match load_qrels(&config.qrels) {
        Ok(q) => Some(q),
        Err(e) => {
            violations.push(format!("evaluation.qrels: {e}"));
            None
        }
    };

    let mut document_count = 0;
    match load_documents(&config.documents) {
        Ok(documents) => {
            document_count = documents.len();
            if let Err(e) = build_index(&documents) {
                violations.push(format!("evaluation.documents: {e}"));
            }
        }
        Err(e) => violations.push(format!("evaluation.documents: {e}")),
    }

    let pool = match &config.example_pool {
        Some(pool_path) => match load_example_pool(pool_path) {
            Ok(pool) => Some(pool),
            Err(e) => {
                violations.push(format!("prompt.example_pool: {e}"));
                None
            }
        },
        None => Some(default_example_pool()),
    };
    if let Some(pool) = &pool {
        let max_requested = config
            .shot_counts
            .iter()
            .copied()
            .chain(std::iter::once(config.shot_count))
            .max()
            .unwrap_or(0);
        if pool.is_empty() && max_requested > 0 {
            violations.push(format!(
                "prompt.example_pool: empty pool cannot serve shot_count {max_requested}"
            ));
        }
    }

    if !conversations.is_empty() && instances.is_empty() {
        violations.push("dataset.conversations: no instances".to_string());
    }
    if !instances.is_empty() && config.pairwise_sample_size > instances.len() {
        violations.push(format!(
            "evaluation.pairwise_sample_size exceeds the instance count ({} > {})",
            config.pairwise_sample_size,
            instances.len()
        ));
    }

    if !violations.is_empty() {
        return Err(CliError::Validation(violations));
    }

    for key in &unmatched {
        println!("warning: annotation for unknown instance \"{key}\"");
    }
    println!("config ok: {}", path.display());
    println!(
        "dataset \"{}\": {} conversations, {} instances ({} annotated)",
        config.dataset_id,
        conversations.len(),
        instances.len(),
        annotated
    );
    println!("documents: {document_count}");
    if let Some(qrels) = &qrels {
        println!("qrels: {} judged instance keys", qrels.len());
    }
    if let Some(pool) = &pool {
        println!("example pool: {} examples", pool.len());
    }
    println!("backend: {}", config.backend.backend_id());
    println!("0 errors");
    Ok(())
}

pub fn cmd_rewrite(config: &Config, shots: Option<usize>) -> anyhow::Result<()> {
    let data = load_data(config, EllipticityMode::Annotations)?;
    let pipeline = build_pipeline(config, data)?;
    let shot_count = shots.unwrap_or(config.shot_count);
    let rows = pipeline
        .generate(shot_count)
        .context("generating rewrites")?;
    let out_path = config.output_dir.join("rewrites.jsonl");
    write_jsonl(&out_path, &rows)?;
    let cached = rows.iter().filter(|r| r.from_cache).count();
    println!(
        "wrote {} rewrites to {} (backend {}, shots {}, {} from cache, {} network calls)",
        rows.len(),
        out_path.display(),
        pipeline.rewriter().backend_id(),
        shot_count,
        cached,
        pipeline.rewriter().network_calls()
    );
    Ok(())
}

pub fn cmd_evaluate(
    config: &Config,
    rewrites: Option<PathBuf>,
    shots: Option<usize>,
    heuristic: bool,
) -> anyhow::Result<()> {
    let mode = if heuristic {
        EllipticityMode::Heuristic
    } else {
        EllipticityMode::Annotations
    };
    let data = load_data(config, mode)?;
    let pipeline = build_pipeline(config, data)?;
    let rewrites_path = rewrites.unwrap_or_else(|| config.output_dir.join("rewrites.jsonl"));
    let rows = read_rewrite_rows(&rewrites_path)?;
    let aligned = align_rewrites(pipeline.instances(), &rows, &rewrites_path)?;
    let (scores, mut report) = pipeline
        .evaluate_rewrites(&aligned, shots)
        .context("scoring rewrites")?;
    if heuristic {
        report.run_metadata.ellipticity_source = EllipticitySource::Heuristic;
    }
    if let Some(file_backend) = uniform_backend_id(&rows) {
        if file_backend != report.run_metadata.backend_id {
            log::info!(
                "rewrites file was produced by {file_backend}; reporting that backend instead of {}",
                report.run_metadata.backend_id
            );
            report.run_metadata.backend_id = file_backend;
        }
    }

    let header = ScoresHeader {
        dataset_id: config.dataset_id.clone(),
        backend_id: report.run_metadata.backend_id.clone(),
        seed: config.seed,
        shots,
    };
    let text = render_report_text(&report);
    write_string(&config.output_dir.join("report.txt"), &text)?;
    write_string(&config.output_dir.join("report.json"), &report_json(&report)?)?;
    write_string(
        &config.output_dir.join("scores.tsv"),
        &render_scores_tsv(&scores, &header),
    )?;
    print!("{text}");
    println!(
        "wrote report.txt, report.json, scores.tsv to {}",
        config.output_dir.display()
    );
    Ok(())
}

pub fn cmd_ablate(config: &Config) -> anyhow::Result<()> {
    let data = load_data(config, EllipticityMode::Annotations)?;
    let pipeline = build_pipeline(config, data)?;
    let runs = pipeline
        .run_ablation(&config.shot_counts)
        .context("running the ablation")?;
    let ablation_dir = config.output_dir.join("ablation");
    let mut reports: BTreeMap<usize, MetricReport> = BTreeMap::new();
    for (k, run) in &runs {
        write_jsonl(&ablation_dir.join(format!("rewrites_k{k}.jsonl")), &run.rows)?;
        write_string(
            &ablation_dir.join(format!("report_k{k}.json")),
            &report_json(&run.report)?,
        )?;
        let header = ScoresHeader {
            dataset_id: config.dataset_id.clone(),
            backend_id: run.report.run_metadata.backend_id.clone(),
            seed: config.seed,
            shots: Some(*k),
        };
        write_string(
            &ablation_dir.join(format!("scores_k{k}.tsv")),
            &render_scores_tsv(&run.scores, &header),
        )?;
        reports.insert(*k, run.report.clone());
    }
    let summary = render_ablation_text(&reports);
    write_string(&ablation_dir.join("summary.txt"), &summary)?;
    print!("{summary}");
    println!(
        "wrote {} per-shot reports and summary.txt to {}",
        runs.len(),
        ablation_dir.display()
    );
    Ok(())
}

pub fn cmd_export_pairwise(
    config: &Config,
    rewrites_a: &Path,
    rewrites_b: &Path,
    sample_size: Option<usize>,
) -> anyhow::Result<()> {
    let data = load_data(config, EllipticityMode::Annotations)?;
    let rows_a = read_rewrite_rows(rewrites_a)?;
    let rows_b = read_rewrite_rows(rewrites_b)?;
    let aligned_a = align_rewrites(&data.instances, &rows_a, rewrites_a)?;
    let aligned_b = align_rewrites(&data.instances, &rows_b, rewrites_b)?;
    let system_a = uniform_backend_id(&rows_a)
        .with_context(|| format!("{}: mixed backend ids", rewrites_a.display()))?;
    let system_b = uniform_backend_id(&rows_b)
        .with_context(|| format!("{}: mixed backend ids", rewrites_b.display()))?;
    if system_a == system_b {
        log::warn!(
            "both rewrite files report backend \"{system_a}\"; the key file will not distinguish the systems"
        );
    }
    let sample = sample_size.unwrap_or(config.pairwise_sample_size);
    let (items, keys) = export_pairwise(
        &data.instances,
        &aligned_a,
        &system_a,
        &aligned_b,
        &system_b,
        sample,
        config.seed,
    )
    .context("sampling pairwise items")?;
    let judge_path = config.output_dir.join("pairwise_judge.jsonl");
    let key_path = config.output_dir.join("pairwise_key.jsonl");
    write_jsonl(&judge_path, &items)?;
    write_jsonl(&key_path, &keys)?;
    println!("wrote {} judge items to {}", items.len(), judge_path.display());
    println!(
        "wrote the hidden assignment key to {} (store it away from judges)",
        key_path.display()
    );
    Ok(())
}

pub fn cmd_report(scores: &Path) -> anyhow::Result<()> {
    let text =
        fs::read_to_string(scores).with_context(|| format!("reading {}", scores.display()))?;
    let (header, rows) = parse_scores_tsv(&text)
        .with_context(|| format!("parsing {}", scores.display()))?;
    let metadata = RunMetadata {
        backend_id: header.backend_id.clone(),
        seed: header.seed,
        dataset_id: header.dataset_id.clone(),
        ellipticity_source: EllipticitySource::Annotations,
        timestamp: None,
    };
    let report = aggregate(&rows, header.shots, metadata).context("aggregating scores")?;
    print!("{}", render_report_text(&report));
    Ok(())
}
