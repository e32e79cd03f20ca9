use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use exaranker::corpus_io::{parse_run, validate_run};
use exaranker::eval::MetricReport;
use exaranker::mock::{MockLlm, MockReply, MockScorer};
use serde_json::Value;
use tokio::runtime::Runtime;

const BIN: &str = env!("CARGO_BIN_EXE_exaranker");

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN).current_dir(dir).args(args).output().unwrap()
}

fn stderr(output: &Output) -> String {
    String::from_utf8_lossy(&output.stderr).into_owned()
}

fn stdout(output: &Output) -> String {
    String::from_utf8_lossy(&output.stdout).into_owned()
}

fn toy(dir: &Path) {
    fs::write(
        dir.join("queries.tsv"),
        "q1\twhat is rust\nq2\twho wrote hamlet\nq3\twhy is the sky blue\n",
    )
    .unwrap();
    fs::write(
        dir.join("collection.tsv"),
        "d1\trust is a systems language\td1 title\n\
         d2\thamlet was written by shakespeare\t\n\
         d3\tthe sky is blue due to rayleigh scattering\t\n\
         d4\tbananas are yellow\t\n\
         d5\tthe ocean is deep\t\n",
    )
    .unwrap();
    fs::write(dir.join("qrels.txt"), "q1 0 d1 1\nq2 0 d2 1\nq3 0 d3 2\nq3 0 d5 0\n").unwrap();
    fs::write(
        dir.join("bm25.trec"),
        "q1 Q0 d4 1 3.0 bm25\nq1 Q0 d1 2 2.0 bm25\nq1 Q0 d5 3 1.0 bm25\n\
         q2 Q0 d2 1 5 bm25\nq2 Q0 d3 2 4 bm25\n\
         q3 Q0 d5 1 9 bm25\nq3 Q0 d3 2 8 bm25\nq3 Q0 d4 3 7 bm25\n",
    )
    .unwrap();
}

#[test]
fn help_lists_every_flag() {
    let dir = tempfile::tempdir().unwrap();
    let expected: &[(&str, &[&str])] = &[
        ("sample", &["--queries", "--collection", "--qrels", "--candidate-run", "--negative-source", "--n-pos", "--n-neg", "--positive-threshold", "--candidate-depth", "--with-title", "--out"]),
        ("augment", &["--pairs", "--template", "--shots", "--model", "--temperature", "--max-output-tokens", "--stop", "--max-retries", "--fallback", "--max-in-flight", "--timeout-secs", "--http-retries", "--out", "--stats", "--dry-run"]),
        ("export", &["--examples", "--with-explanations", "--labels-only", "--source-format", "--template", "--out"]),
        ("rerank", &["--queries", "--collection", "--candidate-run", "--depth", "--scorer-url", "--batch-size", "--max-in-flight", "--timeout-secs", "--http-retries", "--on-failure", "--no-title", "--tag", "--out"]),
        ("eval", &["--run", "--qrels", "--k", "--dataset-id", "--per-query", "--out"]),
        ("report", &["--rows", "--compare", "--against", "--out-dir"]),
    ];
    for (command, flags) in expected {
        let output = run(dir.path(), &[command, "--help"]);
        assert!(output.status.success(), "{command} --help");
        let text = stdout(&output);
        for flag in flags.iter().chain(&["--config", "--seed", "--cache-dir", "--base-url", "--api-key-env"]) {
            assert!(text.contains(flag), "{command} --help lacks {flag}");
        }
    }
    assert!(run(dir.path(), &["--help"]).status.success());
}

#[test]
fn usage_errors_exit_2_and_name_the_flag() {
    let dir = tempfile::tempdir().unwrap();
    toy(dir.path());
    let base = ["sample", "--queries", "queries.tsv", "--collection", "collection.tsv", "--n-pos", "1", "--out", "p.jsonl"];

    let output = run(dir.path(), &base);
    assert_eq!(output.status.code(), Some(2));
    assert!(stderr(&output).contains("--qrels"), "{}", stderr(&output));

    let mut args = base.to_vec();
    args.extend(["--qrels", "missing.txt"]);
    let output = run(dir.path(), &args);
    assert_eq!(output.status.code(), Some(2));
    assert!(stderr(&output).contains("--qrels: no such file"));

    let output = run(dir.path(), &["export", "--examples", "x.jsonl", "--out", "y"]);
    assert_eq!(output.status.code(), Some(2));

    fs::write(dir.path().join("bad.json"), "{\"unknown_key\": 1}").unwrap();
    let output = run(dir.path(), &["--config", "bad.json", "eval"]);
    assert_eq!(output.status.code(), Some(2));
    assert!(stderr(&output).contains("unknown_key"));
}

#[test]
fn runtime_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    toy(dir.path());
    let output = run(
        dir.path(),
        &["sample", "--queries", "queries.tsv", "--collection", "collection.tsv", "--qrels", "qrels.txt", "--n-pos", "10", "--out", "p.jsonl"],
    );
    assert_eq!(output.status.code(), Some(1));
    assert!(stderr(&output).contains("available"), "{}", stderr(&output));
}

#[test]
fn sample_writes_pairs_metadata_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    toy(dir.path());
    let args = ["sample", "--queries", "queries.tsv", "--collection", "collection.tsv", "--qrels", "qrels.txt", "--candidate-run", "bm25.trec", "--n-pos", "3", "--seed", "5", "--out", "out/pairs.jsonl"];
    assert!(run(dir.path(), &args).status.success());
    let first = fs::read(dir.path().join("out/pairs.jsonl")).unwrap();
    let manifest = fs::read(dir.path().join("out/manifest.json")).unwrap();
    assert_eq!(String::from_utf8_lossy(&first).lines().count(), 6);
    assert!(run(dir.path(), &args).status.success());
    assert_eq!(fs::read(dir.path().join("out/pairs.jsonl")).unwrap(), first);
    assert_eq!(fs::read(dir.path().join("out/manifest.json")).unwrap(), manifest);

    let meta: Value = serde_json::from_slice(&fs::read(dir.path().join("out/pairs.jsonl.meta.json")).unwrap()).unwrap();
    assert_eq!(meta["plan"]["seed"], 5);
    assert_eq!(meta["plan"]["negative_source"], "candidate_run");
    assert_eq!(meta["counts"]["relevant"], 3);
    assert_eq!(meta["inputs"]["qrels"]["sha256"].as_str().unwrap().len(), 64);
    let manifest: Value = serde_json::from_slice(&manifest).unwrap();
    assert!(manifest["stages"]["sample"]["outputs"]["pairs"]["sha256"].is_string());

    let empty = ["sample", "--queries", "queries.tsv", "--collection", "collection.tsv", "--qrels", "qrels.txt", "--n-pos", "0", "--n-neg", "0", "--out", "empty.jsonl"];
    assert!(run(dir.path(), &empty).status.success());
    assert_eq!(fs::read(dir.path().join("empty.jsonl")).unwrap().len(), 0);
}

#[test]
fn config_file_supplies_values_and_flags_override() {
    let dir = tempfile::tempdir().unwrap();
    toy(dir.path());
    fs::create_dir(dir.path().join("conf")).unwrap();
    fs::write(
        dir.path().join("conf/pipeline.json"),
        r#"{
            "seed": 9,
            "paths": {"queries": "../queries.tsv", "collection": "../collection.tsv",
                      "qrels": "../qrels.txt", "output_dir": "../runs"},
            "sample": {"n_pos": 2, "n_neg": 1}
        }"#,
    )
    .unwrap();
    let output = run(dir.path(), &["--config", "conf/pipeline.json", "sample", "--n-neg", "3"]);
    assert!(output.status.success(), "{}", stderr(&output));
    let meta: Value = serde_json::from_slice(&fs::read(dir.path().join("runs/pairs.jsonl.meta.json")).unwrap()).unwrap();
    assert_eq!(meta["plan"]["seed"], 9);
    assert_eq!(meta["plan"]["n_pos"], 2);
    assert_eq!(meta["plan"]["n_neg"], 3);
}

#[test]
fn dry_run_prints_three_prompts_without_network() {
    let rt = Runtime::new().unwrap();
    let server = rt.block_on(MockLlm::llm(|_| MockReply::Text("true. Explanation: x".into())));
    let dir = tempfile::tempdir().unwrap();
    toy(dir.path());
    let sample = ["sample", "--queries", "queries.tsv", "--collection", "collection.tsv", "--qrels", "qrels.txt", "--n-pos", "3", "--out", "pairs.jsonl"];
    assert!(run(dir.path(), &sample).status.success());
    let url = server.base_url();
    let output = run(dir.path(), &["augment", "--pairs", "pairs.jsonl", "--base-url", &url, "--model", "m", "--dry-run"]);
    assert!(output.status.success(), "{}", stderr(&output));
    let text = stdout(&output);
    assert_eq!(text.matches("===== prompt").count(), 3);
    assert!(text.contains("Relevant:"));
    assert_eq!(server.calls(), 0);
    assert!(!dir.path().join("cache").exists());
}

#[test]
fn augment_against_dead_endpoint_fails() {
    let dir = tempfile::tempdir().unwrap();
    toy(dir.path());
    let sample = ["sample", "--queries", "queries.tsv", "--collection", "collection.tsv", "--qrels", "qrels.txt", "--n-pos", "1", "--out", "pairs.jsonl"];
    assert!(run(dir.path(), &sample).status.success());
    let output = run(
        dir.path(),
        &["augment", "--pairs", "pairs.jsonl", "--base-url", "http://127.0.0.1:9", "--model", "m", "--http-retries", "0", "--out", "ex.jsonl"],
    );
    assert_eq!(output.status.code(), Some(1));
    assert!(!dir.path().join("ex.jsonl").exists());
}

#[test]
fn rerank_then_eval() {
    let rt = Runtime::new().unwrap();
    // Relevance is keyword overlap with the query, capped below 1.
    let scorer = rt.block_on(MockScorer::scorer(|query, passages, _| {
        let words: Vec<&str> = query.split_whitespace().collect();
        Ok(passages
            .iter()
            .map(|p| {
                let hits = words.iter().filter(|w| w.len() > 3 && p.contains(*w)).count();
                (hits as f64 / 3.0).min(1.0) * 0.9 + 1.0 / 3.0 * 0.1
            })
            .collect())
    }));
    let dir = tempfile::tempdir().unwrap();
    toy(dir.path());
    let url = scorer.base_url();
    let args = ["rerank", "--queries", "queries.tsv", "--collection", "collection.tsv", "--candidate-run", "bm25.trec", "--scorer-url", &url, "--batch-size", "2", "--tag", "mono", "--out", "out/rerank.trec"];
    let output = run(dir.path(), &args);
    assert!(output.status.success(), "{}", stderr(&output));
    let bytes = fs::read(dir.path().join("out/rerank.trec")).unwrap();
    let entries = parse_run(bytes.as_slice()).unwrap();
    validate_run(&entries).unwrap();
    assert_eq!(entries.len(), 8);
    let first_q1 = entries.iter().find(|e| e.qid == "q1" && e.rank == 1).unwrap();
    assert_eq!(first_q1.docid, "d1");
    // Scores carry exactly the six decimals written.
    assert!(entries.iter().all(|e| e.score == (e.score * 1e6).round() / 1e6));
    assert!(run(dir.path(), &args).status.success());
    assert_eq!(fs::read(dir.path().join("out/rerank.trec")).unwrap(), bytes);

    let output = run(dir.path(), &["eval", "--run", "out/rerank.trec", "--qrels", "qrels.txt", "--dataset-id", "toy", "--out", "out/metrics.json"]);
    assert!(output.status.success(), "{}", stderr(&output));
    assert!(stdout(&output).contains("nDCG@10"));
    let report: MetricReport = serde_json::from_slice(&fs::read(dir.path().join("out/metrics.json")).unwrap()).unwrap();
    assert_eq!(report.n_queries, 3);
    assert_eq!(report.dataset_id, "toy");
    assert!(report.per_query.values().all(|v| (0.0..=1.0).contains(v)));
    let manifest: Value = serde_json::from_slice(&fs::read(dir.path().join("out/manifest.json")).unwrap()).unwrap();
    assert!(manifest["stages"]["rerank"].is_object() && manifest["stages"]["eval"].is_object());

    let failing = rt.block_on(MockScorer::scorer(|_, passages, _| Ok(vec![1.5; passages.len()])));
    let url = failing.base_url();
    let output = run(dir.path(), &["rerank", "--queries", "queries.tsv", "--collection", "collection.tsv", "--candidate-run", "bm25.trec", "--scorer-url", &url, "--out", "bad.trec"]);
    assert_eq!(output.status.code(), Some(1));
    assert!(stderr(&output).contains("[0, 1]"), "{}", stderr(&output));
}

#[test]
fn report_builds_table_and_csv_from_metric_reports() {
    let dir = tempfile::tempdir().unwrap();
    let datasets = ["dl20", "robust04", "trec-covid", "dbpedia", "fiqa", "trec-news", "nfcorpus"];
    let mut reports = Vec::new();
    for (i, id) in datasets.iter().enumerate() {
        let report = MetricReport {
            dataset_id: id.to_string(),
            k: 10,
            per_query: Default::default(),
            mean: 0.4 + i as f64 / 100.0,
            n_queries: 1,
        };
        let name = format!("{id}.json");
        fs::write(dir.path().join(&name), serde_json::to_string(&report).unwrap()).unwrap();
        reports.push(name);
    }
    let rows = serde_json::json!([
        {"model_name": "base", "ft_pos": 2500, "reports": reports},
        {"model_name": "base", "ft_pos": 2500, "dataset_means": {"dl20": 0.5, "robust04": 0.5, "trec-covid": 0.5, "dbpedia": 0.5, "fiqa": 0.5, "trec-news": 0.5, "nfcorpus": 0.5}},
    ]);
    fs::write(dir.path().join("rows.json"), rows.to_string()).unwrap();
    let output = run(dir.path(), &["report", "--rows", "rows.json", "--out-dir", "report"]);
    assert!(output.status.success(), "{}", stderr(&output));
    let table = stdout(&output);
    assert!(table.contains("Avg ZS") && table.contains("2.5k"));
    // Two attempts average into one row: zero-shot means 0.435 and 0.5.
    assert_eq!(table.lines().count(), 3, "{table}");
    assert!(table.contains("0.468"), "{table}");
    let csv = fs::read_to_string(dir.path().join("report/curves.csv")).unwrap();
    assert!(csv.starts_with("model,llm,ft_pos,dl20,"));
    assert!(!dir.path().join("report/improvement.json").exists());

    let output = run(dir.path(), &["report", "--rows", "rows.json", "--out-dir", "report", "--compare", "base", "--against", "other"]);
    assert_eq!(output.status.code(), Some(2));
}
