//! Report rendering: fixed-width text tables for humans and a tab-separated
//! per-instance file for machines.
//!
//! The text report mirrors the experiment's analysis cuts: an overall
//! four-metric row per system, a per-shot-count table for ablations, and
//! Success Rate@10 broken down by turn depth and by ellipticity. BLEU-4 and
//! ROUGE-L display scaled to 0-100 with one decimal; Success Rate@10 and MRR
//! display as plain two-decimal fractions.
//!
//! The TSV file serializes floats with Rust's shortest-round-trip format, so
//! a report recomputed from it is bit-identical to one computed in memory.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use thiserror::Error;

use crate::analysis::{EllipticitySource, InstanceScore, MetricReport, OverallScores};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ReportParseError {
    #[error("line {line}: {detail}")]
    Malformed { line: usize, detail: String },
    #[error("missing header line")]
    MissingHeader,
}

const SCORES_HEADER_TAG: &str = "# cqr-scores v1";
const SCORES_COLUMNS: &str =
    "instance_key\tturn_index\telliptical\tbleu4\trouge_l\tsuccess\treciprocal_rank";

/// Run identity carried in the first line of a scores file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScoresHeader {
    pub dataset_id: String,
    pub backend_id: String,
    pub seed: u64,
    /// Shot count the rewrites were generated with, when known.
    pub shots: Option<usize>,
}

fn metric_row(label: &str, width: usize, scores: &OverallScores) -> String {
    format!(
        "{label:<width$}  {:>7.1}  {:>8.1}  {:>16.2}  {:>6.2}\n",
        scores.bleu4 * 100.0,
        scores.rouge_l * 100.0,
        scores.success_at_10,
        scores.mrr
    )
}

fn metric_header(label: &str, width: usize) -> String {
    format!("{label:<width$}  {:>7}  {:>8}  {:>16}  {:>6}\n", "BLEU-4", "ROUGE-L", "Success Rate@10", "MRR")
}

fn shots_label(k: usize) -> String {
    if k == 0 {
        "0 (Zero-shot)".to_string()
    } else {
        k.to_string()
    }
}

/// Renders the full text report for one run.
pub fn render_report_text(report: &MetricReport) -> String {
    let meta = &report.run_metadata;
    let mut out = format!(
        "dataset: {}\nbackend: {}\nseed: {}\n",
        meta.dataset_id, meta.backend_id, meta.seed
    );

    out.push_str("\n== Overall ==\n");
    let width = "system".len().max(meta.backend_id.len());
    out.push_str(&metric_header("system", width));
    out.push_str(&metric_row(&meta.backend_id, width, &report.overall));

    if !report.by_shots.is_empty() {
        out.push('\n');
        out.push_str(&render_shots_table(&report.by_shots));
    }

    if !report.by_turn_bucket.is_empty() {
        out.push_str("\n== Success Rate@10 by turn depth ==\n");
        let width = report
            .by_turn_bucket
            .keys()
            .map(|b| b.label().len())
            .chain(["bucket".len()])
            .max()
            .expect("non-empty map");
        writeln!(out, "{:<width$}  {:>9}  {:>15}", "bucket", "instances", "Success Rate@10")
            .expect("string write");
        for (bucket, stat) in &report.by_turn_bucket {
            writeln!(
                out,
                "{:<width$}  {:>9}  {:>15.2}",
                bucket.label(),
                stat.count,
                stat.success_at_10
            )
            .expect("string write");
        }
    }

    if !report.by_ellipticity.is_empty() {
        match meta.ellipticity_source {
            EllipticitySource::Annotations => {
                out.push_str("\n== Success Rate@10 by query type ==\n");
            }
            EllipticitySource::Heuristic => {
                out.push_str("\n== Success Rate@10 by query type (heuristic labels, approximate) ==\n");
            }
        }
        let width = report
            .by_ellipticity
            .keys()
            .map(|c| c.label().len())
            .chain(["query type".len()])
            .max()
            .expect("non-empty map");
        writeln!(out, "{:<width$}  {:>9}  {:>15}", "query type", "instances", "Success Rate@10")
            .expect("string write");
        for (class, stat) in &report.by_ellipticity {
            writeln!(
                out,
                "{:<width$}  {:>9}  {:>15.2}",
                class.label(),
                stat.count,
                stat.success_at_10
            )
            .expect("string write");
        }
        if report.unannotated_count > 0 {
            writeln!(out, "(unannotated instances excluded: {})", report.unannotated_count)
                .expect("string write");
        }
    }

    out
}

fn render_shots_table(by_shots: &BTreeMap<usize, OverallScores>) -> String {
    let mut out = String::from("== By number of in-context examples ==\n");
    let width = by_shots
        .keys()
        .map(|k| shots_label(*k).len())
        .chain(["examples".len()])
        .max()
        .expect("non-empty map");
    out.push_str(&metric_header("examples", width));
    for (k, scores) in by_shots {
        out.push_str(&metric_row(&shots_label(*k), width, scores));
    }
    out
}

/// Renders the combined ablation summary: run metadata from the first
/// report, then one metrics row per shot count.
pub fn render_ablation_text(reports: &BTreeMap<usize, MetricReport>) -> String {
    let Some(first) = reports.values().next() else {
        return String::from("(no ablation runs)\n");
    };
    let meta = &first.run_metadata;
    let mut out = format!(
        "dataset: {}\nbackend: {}\nseed: {}\n\n",
        meta.dataset_id, meta.backend_id, meta.seed
    );
    let merged: BTreeMap<usize, OverallScores> = reports
        .iter()
        .map(|(k, report)| (*k, report.overall))
        .collect();
    out.push_str(&render_shots_table(&merged));
    out
}

fn float_field(value: Option<f64>) -> String {
    match value {
        Some(v) => format!("{v}"),
        None => "NA".to_string(),
    }
}

/// Renders per-instance scores as TSV with a `# cqr-scores v1` header line
/// carrying the run identity.
pub fn render_scores_tsv(scores: &[InstanceScore], header: &ScoresHeader) -> String {
    let shots = match header.shots {
        Some(k) => k.to_string(),
        None => "NA".to_string(),
    };
    let mut out = format!(
        "{SCORES_HEADER_TAG}\tdataset={}\tbackend={}\tseed={}\tshots={shots}\n",
        header.dataset_id, header.backend_id, header.seed
    );
    out.push_str(SCORES_COLUMNS);
    out.push('\n');
    for score in scores {
        let elliptical = match score.elliptical {
            Some(true) => "true",
            Some(false) => "false",
            None => "NA",
        };
        writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            score.instance_key,
            score.turn_index,
            elliptical,
            float_field(score.bleu4),
            float_field(score.rouge_l),
            score.success_at_k,
            score.reciprocal_rank
        )
        .expect("string write");
    }
    out
}

/// Parses a scores TSV back into its header and rows; the inverse of
/// [`render_scores_tsv`].
pub fn parse_scores_tsv(text: &str) -> Result<(ScoresHeader, Vec<InstanceScore>), ReportParseError> {
    let mut lines = text.lines().enumerate();
    let (_, header_line) = lines.next().ok_or(ReportParseError::MissingHeader)?;
    if !header_line.starts_with(SCORES_HEADER_TAG) {
        return Err(ReportParseError::MissingHeader);
    }
    let mut dataset_id = None;
    let mut backend_id = None;
    let mut seed = None;
    let mut shots = None;
    for field in header_line.split('\t').skip(1) {
        let (key, value) = field.split_once('=').ok_or_else(|| ReportParseError::Malformed {
            line: 1,
            detail: format!("header field \"{field}\" is not key=value"),
        })?;
        match key {
            "dataset" => dataset_id = Some(value.to_string()),
            "backend" => backend_id = Some(value.to_string()),
            "seed" => {
                seed = Some(value.parse().map_err(|_| ReportParseError::Malformed {
                    line: 1,
                    detail: format!("seed \"{value}\" is not an integer"),
                })?)
            }
            "shots" => {
                shots = if value == "NA" {
                    None
                } else {
                    Some(value.parse().map_err(|_| ReportParseError::Malformed {
                        line: 1,
                        detail: format!("shots \"{value}\" is not an integer"),
                    })?)
                }
            }
            other => {
                return Err(ReportParseError::Malformed {
                    line: 1,
                    detail: format!("unknown header field \"{other}\""),
                })
            }
        }
    }
    let header = ScoresHeader {
        dataset_id: dataset_id.ok_or_else(|| ReportParseError::Malformed {
            line: 1,
            detail: "header missing dataset".to_string(),
        })?,
        backend_id: backend_id.ok_or_else(|| ReportParseError::Malformed {
            line: 1,
            detail: "header missing backend".to_string(),
        })?,
        seed: seed.ok_or_else(|| ReportParseError::Malformed {
            line: 1,
            detail: "header missing seed".to_string(),
        })?,
        shots,
    };

    let mut scores = Vec::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        if line.trim().is_empty() || line == SCORES_COLUMNS {
            continue;
        }
        let malformed = |detail: String| ReportParseError::Malformed {
            line: line_no,
            detail,
        };
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 7 {
            return Err(malformed(format!("expected 7 columns, found {}", cols.len())));
        }
        let parse_float = |s: &str, name: &str| -> Result<Option<f64>, ReportParseError> {
            if s == "NA" {
                return Ok(None);
            }
            s.parse::<f64>()
                .map(Some)
                .map_err(|_| malformed(format!("{name} \"{s}\" is not a number")))
        };
        scores.push(InstanceScore {
            instance_key: cols[0].to_string(),
            turn_index: cols[1]
                .parse()
                .map_err(|_| malformed(format!("turn_index \"{}\" is not an integer", cols[1])))?,
            elliptical: match cols[2] {
                "true" => Some(true),
                "false" => Some(false),
                "NA" => None,
                other => return Err(malformed(format!("elliptical \"{other}\" is not true/false/NA"))),
            },
            bleu4: parse_float(cols[3], "bleu4")?,
            rouge_l: parse_float(cols[4], "rouge_l")?,
            success_at_k: cols[5]
                .parse()
                .map_err(|_| malformed(format!("success \"{}\" is not 0/1", cols[5])))?,
            reciprocal_rank: parse_float(cols[6], "reciprocal_rank")?.ok_or_else(|| {
                malformed("reciprocal_rank may not be NA".to_string())
            })?,
        });
    }
    Ok((header, scores))
}
