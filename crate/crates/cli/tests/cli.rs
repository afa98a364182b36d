//! End-to-end tests of the command-line contract: exit codes, error
//! wording, output files, and flag overrides.

mod support;

use std::fs;
use std::path::Path;

use support::{cqr, fixture};

fn write(path: &Path, contents: &str) {
    fs::write(path, contents).unwrap();
}

fn stdout_of(out: &std::process::Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr_of(out: &std::process::Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn validate_reports_zero_errors_on_the_fixture() {
    let out = cqr(&["validate", "--config", &fixture("config.json")]);
    assert!(out.status.success(), "{}", stderr_of(&out));
    let stdout = stdout_of(&out);
    assert!(stdout.contains("0 errors"), "{stdout}");
    assert!(stdout.contains("77 instances"), "{stdout}");
}

#[test]
fn invalid_shot_count_exits_one_naming_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("config.json");
    write(
        &config,
        &format!(
            r#"{{"dataset": {{"id": "t", "conversations": "{conv}"}},
                "prompt": {{"shot_count": -1}},
                "backend": {{"kind": "identity"}},
                "evaluation": {{"qrels": "{qrels}", "documents": "{docs}"}}}}"#,
            conv = fixture("conversations.jsonl"),
            qrels = fixture("qrels.txt"),
            docs = fixture("documents.jsonl"),
        ),
    );
    let out = cqr(&["validate", "--config", config.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = stderr_of(&out);
    assert!(stderr.contains("prompt.shot_count must be >= 0"), "{stderr}");
}

#[test]
fn missing_qrels_exits_one_naming_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("config.json");
    write(
        &config,
        &format!(
            r#"{{"dataset": {{"id": "t", "conversations": "{conv}"}},
                "backend": {{"kind": "identity"}},
                "evaluation": {{"qrels": "no_such_file.txt", "documents": "{docs}"}}}}"#,
            conv = fixture("conversations.jsonl"),
            docs = fixture("documents.jsonl"),
        ),
    );
    let out = cqr(&["validate", "--config", config.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr_of(&out).contains("evaluation.qrels"), "{}", stderr_of(&out));
}

#[test]
fn evaluate_rejects_orphan_keys_with_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().to_str().unwrap();
    let rewrite = cqr(&["rewrite", "--config", &fixture("config.json"), "--out", out_dir]);
    assert!(rewrite.status.success(), "{}", stderr_of(&rewrite));
    let rewrites_path = dir.path().join("rewrites.jsonl");
    let mut contents = fs::read_to_string(&rewrites_path).unwrap();
    contents.push_str(
        "{\"instance_key\":\"c99_1\",\"rewrite\":\"ghost\",\"backend_id\":\"identity\",\"from_cache\":false}\n",
    );
    write(&rewrites_path, &contents);
    let out = cqr(&["evaluate", "--config", &fixture("config.json"), "--out", out_dir]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = stderr_of(&out);
    assert!(stderr.contains("orphan instance_key"), "{stderr}");
    assert!(stderr.contains("c99_1"), "{stderr}");
}

#[test]
fn evaluate_without_rewrites_file_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = cqr(&[
        "evaluate",
        "--config",
        &fixture("config.json"),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_of(&out).contains("rewrites.jsonl"), "{}", stderr_of(&out));
}

#[test]
fn identity_rewrites_echo_the_queries() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().to_str().unwrap();
    let out = cqr(&["rewrite", "--config", &fixture("config.json"), "--out", out_dir]);
    assert!(out.status.success(), "{}", stderr_of(&out));
    let rewrites = fs::read_to_string(dir.path().join("rewrites.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(rewrites.lines().next().unwrap()).unwrap();
    assert_eq!(first["instance_key"], "c01_1");
    assert_eq!(first["rewrite"], "Find me information about the capital of France.");
    assert_eq!(first["backend_id"], "identity");
    assert_eq!(rewrites.lines().count(), 77);
}

#[test]
fn backend_override_switches_to_concat() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().to_str().unwrap();
    let out = cqr(&[
        "rewrite",
        "--config",
        &fixture("config.json"),
        "--out",
        out_dir,
        "--backend",
        "concat",
    ]);
    assert!(out.status.success(), "{}", stderr_of(&out));
    let rewrites = fs::read_to_string(dir.path().join("rewrites.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(rewrites.lines().next().unwrap()).unwrap();
    assert_eq!(first["backend_id"], "concat");
}

#[test]
fn unknown_backend_override_exits_one() {
    let out = cqr(&[
        "rewrite",
        "--config",
        &fixture("config.json"),
        "--backend",
        "telepathy",
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr_of(&out).contains("telepathy"), "{}", stderr_of(&out));
}

#[test]
fn replay_with_unprimed_cache_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let cache = dir.path().join("cache.jsonl");
    write(
        &cache,
        "{\"hash\":\"0000000000000000000000000000000000000000000000000000000000000000\",\"backend_id\":\"identity\",\"temperature\":0.0,\"raw\":\"nothing\"}\n",
    );
    let config = dir.path().join("config.json");
    write(
        &config,
        &format!(
            r#"{{"dataset": {{"id": "t", "conversations": "{conv}"}},
                "prompt": {{"example_pool": "{pool}"}},
                "backend": {{"kind": "replay", "cache_path": "cache.jsonl"}},
                "evaluation": {{"qrels": "{qrels}", "documents": "{docs}"}},
                "output_dir": "out"}}"#,
            conv = fixture("conversations.jsonl"),
            pool = fixture("example_pool.jsonl"),
            qrels = fixture("qrels.txt"),
            docs = fixture("documents.jsonl"),
        ),
    );
    let out = cqr(&["rewrite", "--config", config.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_of(&out).contains("cache miss"), "{}", stderr_of(&out));
}

#[test]
fn heuristic_ellipticity_flag_marks_the_report() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().to_str().unwrap();
    let config = fixture("config.json");
    assert!(cqr(&["rewrite", "--config", &config, "--out", out_dir]).status.success());
    let out = cqr(&[
        "evaluate",
        "--config",
        &config,
        "--out",
        out_dir,
        "--heuristic-ellipticity",
    ]);
    assert!(out.status.success(), "{}", stderr_of(&out));
    let report = fs::read_to_string(dir.path().join("report.txt")).unwrap();
    assert!(report.contains("heuristic labels, approximate"), "{report}");
    assert!(!report.contains("unannotated instances excluded"), "{report}");
}

#[test]
fn evaluate_labels_shots_when_asked() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().to_str().unwrap();
    let config = fixture("config.json");
    assert!(cqr(&["rewrite", "--config", &config, "--out", out_dir]).status.success());
    let out = cqr(&["evaluate", "--config", &config, "--out", out_dir, "--shots", "5"]);
    assert!(out.status.success(), "{}", stderr_of(&out));
    let report = fs::read_to_string(dir.path().join("report.txt")).unwrap();
    assert!(report.contains("By number of in-context examples"), "{report}");
    let scores = fs::read_to_string(dir.path().join("scores.tsv")).unwrap();
    assert!(scores.lines().next().unwrap().contains("shots=5"), "{scores}");
}

#[test]
fn export_pairwise_is_blind_and_seed_stable() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().to_str().unwrap();
    let config = fixture("config.json");
    assert!(cqr(&["rewrite", "--config", &config, "--out", out_dir]).status.success());
    let identity = dir.path().join("rewrites.jsonl");
    let concat_dir = tempfile::tempdir().unwrap();
    assert!(cqr(&[
        "rewrite",
        "--config",
        &config,
        "--out",
        concat_dir.path().to_str().unwrap(),
        "--backend",
        "concat"
    ])
    .status
    .success());
    let concat = concat_dir.path().join("rewrites.jsonl");
    let export = |out: &str| {
        let run = cqr(&[
            "export-pairwise",
            "--config",
            &config,
            "--out",
            out,
            "--rewrites-a",
            identity.to_str().unwrap(),
            "--rewrites-b",
            concat.to_str().unwrap(),
            "--sample-size",
            "12",
        ]);
        assert!(run.status.success(), "{}", stderr_of(&run));
    };
    export(out_dir);
    let judge = fs::read_to_string(dir.path().join("pairwise_judge.jsonl")).unwrap();
    let key = fs::read_to_string(dir.path().join("pairwise_key.jsonl")).unwrap();
    assert_eq!(judge.lines().count(), 12);
    assert_eq!(key.lines().count(), 12);
    // The judge file must leak neither system identities nor instance keys.
    assert!(!judge.contains("identity"), "judge file leaks a backend id");
    assert!(!judge.contains("concat"), "judge file leaks a backend id");
    assert!(!judge.contains("instance_key"), "judge file leaks instance keys");
    assert!(key.contains("identity") && key.contains("concat"));
    // Same seed, same sample.
    let second = tempfile::tempdir().unwrap();
    export(second.path().to_str().unwrap());
    assert_eq!(
        judge,
        fs::read_to_string(second.path().join("pairwise_judge.jsonl")).unwrap()
    );
    assert_eq!(
        key,
        fs::read_to_string(second.path().join("pairwise_key.jsonl")).unwrap()
    );
}

#[test]
fn export_pairwise_rejects_oversized_samples() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().to_str().unwrap();
    let config = fixture("config.json");
    assert!(cqr(&["rewrite", "--config", &config, "--out", out_dir]).status.success());
    let rewrites = dir.path().join("rewrites.jsonl");
    let out = cqr(&[
        "export-pairwise",
        "--config",
        &config,
        "--out",
        out_dir,
        "--rewrites-a",
        rewrites.to_str().unwrap(),
        "--rewrites-b",
        rewrites.to_str().unwrap(),
        "--sample-size",
        "9999",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_of(&out).contains("9999"), "{}", stderr_of(&out));
}

#[test]
fn report_rerenders_scores_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().to_str().unwrap();
    let config = fixture("config.json");
    assert!(cqr(&["rewrite", "--config", &config, "--out", out_dir]).status.success());
    let evaluate = cqr(&["evaluate", "--config", &config, "--out", out_dir]);
    assert!(evaluate.status.success());
    let report = cqr(&[
        "report",
        "--scores",
        dir.path().join("scores.tsv").to_str().unwrap(),
    ]);
    assert!(report.status.success(), "{}", stderr_of(&report));
    let rendered = stdout_of(&report);
    let written = fs::read_to_string(dir.path().join("report.txt")).unwrap();
    assert_eq!(rendered, written);
}

#[test]
fn report_rejects_malformed_scores_with_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let scores = dir.path().join("scores.tsv");
    write(&scores, "not a scores file\n");
    let out = cqr(&["report", "--scores", scores.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn seed_override_changes_the_pairwise_sample() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().to_str().unwrap();
    let config = fixture("config.json");
    assert!(cqr(&["rewrite", "--config", &config, "--out", out_dir]).status.success());
    let rewrites = dir.path().join("rewrites.jsonl");
    let rewrites = rewrites.to_str().unwrap();
    let export = |seed: &str, out: &Path| {
        let run = cqr(&[
            "export-pairwise",
            "--config",
            &config,
            "--out",
            out.to_str().unwrap(),
            "--seed",
            seed,
            "--rewrites-a",
            rewrites,
            "--rewrites-b",
            rewrites,
        ]);
        assert!(run.status.success(), "{}", stderr_of(&run));
        fs::read_to_string(out.join("pairwise_key.jsonl")).unwrap()
    };
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    let dir_c = tempfile::tempdir().unwrap();
    let key_a = export("11", dir_a.path());
    let key_b = export("11", dir_b.path());
    let key_c = export("12", dir_c.path());
    assert_eq!(key_a, key_b, "same seed must reproduce the same sample");
    assert_ne!(key_a, key_c, "different seeds should pick different samples");
}
