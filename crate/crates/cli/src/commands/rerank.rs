use std::collections::{HashMap, HashSet};
use std::io::Write;
use std::path::PathBuf;

use anyhow::Context;
use clap::{Args, ValueEnum};
use exaranker::corpus_io::{candidates_from_run, write_run, CollectionFile};
use exaranker::rerank::{ScoreFailurePolicy, ScorerClient, ScorerEndpoint};
use serde_json::json;

use super::{create, load_queries, load_run, runtime, secs};
use crate::config::{input_file, output_path, required, usage, ConfigFile};
use crate::manifest::{parent_dir, Stage};
use crate::Global;

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum FailureArg {
    Abort,
    Sentinel,
}

#[derive(Args, Debug)]
pub struct RerankArgs {
    /// Queries TSV.
    #[arg(long, value_name = "PATH")]
    queries: Option<PathBuf>,

    /// Collection TSV or BEIR `.jsonl`.
    #[arg(long, value_name = "PATH")]
    collection: Option<PathBuf>,

    /// First-stage TREC run to rerank.
    #[arg(long, value_name = "PATH")]
    candidate_run: Option<PathBuf>,

    /// Candidates per query to rerank (default: all).
    #[arg(long)]
    depth: Option<usize>,

    /// Scorer base URL (default: `scorer.base_url`, then --base-url).
    #[arg(long, value_name = "URL")]
    scorer_url: Option<String>,

    /// Passages per /score request (default 32).
    #[arg(long)]
    batch_size: Option<usize>,

    /// Concurrent /score requests across all queries (default 4).
    #[arg(long)]
    max_in_flight: Option<usize>,

    /// Per-request timeout in seconds (default 60).
    #[arg(long)]
    timeout_secs: Option<f64>,

    /// HTTP-level retries for 429, 5xx and timeouts (default 5).
    #[arg(long)]
    http_retries: Option<u32>,

    /// What to do when a batch cannot be scored (default abort).
    #[arg(long, value_enum)]
    on_failure: Option<FailureArg>,

    /// Send passage text without its title.
    #[arg(long)]
    no_title: bool,

    /// Run tag written in the last column.
    #[arg(long, default_value = "exaranker")]
    tag: String,

    /// Output run file (default `{output_dir}/run.trec`).
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
}

pub fn run(args: RerankArgs, global: &Global, config: &ConfigFile) -> anyhow::Result<()> {
    let paths = &config.paths;
    let section = &config.scorer;
    let queries_path = input_file(
        required(args.queries, paths.queries.clone(), "--queries", "paths.queries")?,
        "--queries",
    )?;
    let collection_path = input_file(
        required(args.collection, paths.collection.clone(), "--collection", "paths.collection")?,
        "--collection",
    )?;
    let run_path = input_file(
        required(args.candidate_run, paths.candidate_run.clone(), "--candidate-run", "paths.candidate_run")?,
        "--candidate-run",
    )?;
    let out = output_path(args.out, paths.run.clone(), paths.output_dir.as_deref(), "run.trec", "--out")?;
    let base_url = args
        .scorer_url
        .or_else(|| section.base_url.clone())
        .or_else(|| global.base_url.clone())
        .or_else(|| config.base_url.clone())
        .ok_or_else(|| usage("missing --scorer-url (or --base-url, or `scorer.base_url` in the config file)"))?;
    if args.tag.is_empty() || args.tag.contains(char::is_whitespace) {
        return Err(usage("--tag must be non-empty without whitespace"));
    }

    let mut endpoint = ScorerEndpoint::new(&base_url);
    endpoint.batch_size = args.batch_size.or(section.batch_size).unwrap_or(endpoint.batch_size);
    endpoint.max_in_flight = args.max_in_flight.or(section.max_in_flight).unwrap_or(endpoint.max_in_flight);
    endpoint.timeout = secs(args.timeout_secs.or(section.timeout_secs).unwrap_or(60.0), "--timeout-secs")?;
    endpoint.retry.max_retries = args.http_retries.or(section.http_retries).unwrap_or(endpoint.retry.max_retries);
    endpoint.on_failure = args
        .on_failure
        .map(|f| match f {
            FailureArg::Abort => ScoreFailurePolicy::Abort,
            FailureArg::Sentinel => ScoreFailurePolicy::Sentinel,
        })
        .or(section.on_failure)
        .unwrap_or(endpoint.on_failure);
    endpoint.with_title = !args.no_title && section.with_title.unwrap_or(true);
    let resolved = json!({
        "base_url": endpoint.base_url,
        "batch_size": endpoint.batch_size,
        "max_in_flight": endpoint.max_in_flight,
        "timeout_secs": endpoint.timeout.as_secs_f64(),
        "http_retries": endpoint.retry.max_retries,
        "on_failure": endpoint.on_failure,
        "with_title": endpoint.with_title,
        "depth": args.depth,
        "tag": args.tag,
        "score_precision": 6,
    });
    let client = ScorerClient::new(endpoint).map_err(|e| usage(e.to_string()))?;

    let sets = candidates_from_run(&load_run(&run_path)?, args.depth);
    let wanted_queries: HashSet<&str> = sets.iter().map(|s| s.qid.as_str()).collect();
    let queries: HashMap<_, _> = load_queries(&queries_path)?
        .into_iter()
        .filter(|q| wanted_queries.contains(q.qid.as_str()))
        .map(|q| (q.qid.clone(), q))
        .collect();
    let wanted_docs: HashSet<&str> = sets
        .iter()
        .flat_map(|s| s.candidates.iter().map(|(d, _)| d.as_str()))
        .collect();
    let mut passages = HashMap::new();
    for passage in CollectionFile::new(&collection_path).passages()? {
        let passage = passage.with_context(|| format!("reading {}", collection_path.display()))?;
        if wanted_docs.contains(passage.docid.as_str()) && !passages.contains_key(&passage.docid) {
            passages.insert(passage.docid.clone(), passage);
        }
    }

    let run = runtime()?.block_on(async {
        client.healthz().await.context("scorer health check failed")?;
        client
            .rerank_all(&queries, &sets, &passages, &args.tag, true)
            .await
            .context("reranking failed")
    })?;

    let mut writer = create(&out)?;
    write_run(&run, &mut writer).with_context(|| format!("writing {}", out.display()))?;
    drop(writer);
    Stage::new("rerank", &resolved)
        .input("queries", &queries_path)
        .input("collection", &collection_path)
        .input("candidate_run", &run_path)
        .output("run", &out)
        .write(&parent_dir(&out))?;

    writeln!(
        std::io::stdout().lock(),
        "reranked {} queries, {} documents ({} scorer retries) -> {}",
        sets.len(),
        run.len(),
        client.retries(),
        out.display()
    )?;
    Ok(())
}
