use std::io::Write;
use std::path::PathBuf;

use anyhow::Context;
use clap::{Args, ValueEnum};
use exaranker::corpus_io::{candidates_from_run, file_sha256, CollectionFile};
use exaranker::sampler::{sample_pairs, write_pairs_jsonl, NegativeSource, SampleError, SamplePlan};
use serde_json::json;

use super::{create, load_qrels, load_queries, load_run};
use crate::config::{input_file, output_path, required, usage, ConfigFile};
use crate::manifest::{parent_dir, write_atomic, Stage};
use crate::Global;

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SourceArg {
    CandidateRun,
    RandomCollection,
}

impl From<SourceArg> for NegativeSource {
    fn from(value: SourceArg) -> Self {
        match value {
            SourceArg::CandidateRun => NegativeSource::CandidateRun,
            SourceArg::RandomCollection => NegativeSource::RandomCollection,
        }
    }
}

#[derive(Args, Debug)]
pub struct SampleArgs {
    /// Queries TSV (`qid<TAB>text`).
    #[arg(long, value_name = "PATH")]
    queries: Option<PathBuf>,

    /// Collection: TSV (`docid<TAB>text[<TAB>title]`) or BEIR `.jsonl`.
    #[arg(long, value_name = "PATH")]
    collection: Option<PathBuf>,

    /// TREC qrels.
    #[arg(long, value_name = "PATH")]
    qrels: Option<PathBuf>,

    /// First-stage TREC run supplying negative candidates.
    #[arg(long, value_name = "PATH")]
    candidate_run: Option<PathBuf>,

    /// Where negatives come from. Defaults to candidate-run when a run is given.
    #[arg(long, value_enum)]
    negative_source: Option<SourceArg>,

    /// Number of relevant pairs.
    #[arg(long)]
    n_pos: Option<usize>,

    /// Number of non-relevant pairs (default: same as --n-pos).
    #[arg(long)]
    n_neg: Option<usize>,

    /// Minimum qrels grade counted as relevant (default 1).
    #[arg(long)]
    positive_threshold: Option<u32>,

    /// Top candidates per query eligible as negatives (default: all).
    #[arg(long)]
    candidate_depth: Option<usize>,

    /// Prefix passage text with its title.
    #[arg(long)]
    with_title: bool,

    /// Output JSONL (default `{output_dir}/pairs.jsonl`).
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
}

pub fn run(args: SampleArgs, global: &Global, config: &ConfigFile) -> anyhow::Result<()> {
    let paths = &config.paths;
    let section = &config.sample;
    let queries_path = input_file(
        required(args.queries, paths.queries.clone(), "--queries", "paths.queries")?,
        "--queries",
    )?;
    let collection_path = input_file(
        required(args.collection, paths.collection.clone(), "--collection", "paths.collection")?,
        "--collection",
    )?;
    let qrels_path = input_file(
        required(args.qrels, paths.qrels.clone(), "--qrels", "paths.qrels")?,
        "--qrels",
    )?;
    let run_path = args
        .candidate_run
        .or_else(|| paths.candidate_run.clone())
        .map(|p| input_file(p, "--candidate-run"))
        .transpose()?;
    let out = output_path(args.out, None, paths.output_dir.as_deref(), "pairs.jsonl", "--out")?;

    let n_pos = required(args.n_pos, section.n_pos, "--n-pos", "sample.n_pos")?;
    let negative_source = args
        .negative_source
        .map(NegativeSource::from)
        .or(section.negative_source)
        .unwrap_or(if run_path.is_some() {
            NegativeSource::CandidateRun
        } else {
            NegativeSource::RandomCollection
        });
    if negative_source == NegativeSource::CandidateRun && run_path.is_none() {
        return Err(usage("--negative-source candidate-run needs --candidate-run"));
    }
    let plan = SamplePlan {
        n_pos,
        n_neg: args.n_neg.or(section.n_neg).unwrap_or(n_pos),
        seed: global.seed.or(config.seed).unwrap_or(42),
        negative_source,
        positive_threshold: args.positive_threshold.or(section.positive_threshold).unwrap_or(1),
        candidate_depth: args.candidate_depth.or(section.candidate_depth),
        with_title: args.with_title || section.with_title.unwrap_or(false),
    };
    if plan.positive_threshold == 0 {
        return Err(usage("--positive-threshold must be >= 1"));
    }

    let queries = load_queries(&queries_path)?;
    let qrels = load_qrels(&qrels_path)?;
    let candidates = match (&run_path, negative_source) {
        (Some(path), NegativeSource::CandidateRun) => Some(candidates_from_run(&load_run(path)?, plan.candidate_depth)),
        _ => None,
    };
    let collection = CollectionFile::new(&collection_path);
    let pairs = sample_pairs(&queries, &collection, &qrels, candidates.as_deref(), &plan).map_err(|e| match e {
        SampleError::InvalidThreshold => usage(e.to_string()),
        other => anyhow::Error::new(other).context("sampling failed"),
    })?;

    let mut writer = create(&out)?;
    write_pairs_jsonl(&pairs, &mut writer).with_context(|| format!("writing {}", out.display()))?;
    drop(writer);

    let mut inputs = vec![
        ("queries", &queries_path),
        ("collection", &collection_path),
        ("qrels", &qrels_path),
    ];
    if let Some(path) = &run_path {
        inputs.push(("candidate_run", path));
    }
    let mut digests = serde_json::Map::new();
    for (role, path) in &inputs {
        digests.insert(
            role.to_string(),
            json!({ "path": path.display().to_string(), "sha256": file_sha256(path)? }),
        );
    }
    let positives = pairs.iter().filter(|p| p.label.is_relevant()).count();
    let metadata = json!({
        "plan": plan,
        "prng": "xoshiro256** seeded through SplitMix64; Fisher-Yates over id-sorted pools",
        "counts": { "relevant": positives, "non_relevant": pairs.len() - positives },
        "inputs": digests,
        "output_sha256": file_sha256(&out)?,
    });
    let mut meta_path = out.clone().into_os_string();
    meta_path.push(".meta.json");
    let meta_path = PathBuf::from(meta_path);
    write_atomic(&meta_path, (serde_json::to_string_pretty(&metadata)? + "\n").as_bytes())?;

    let mut stage = Stage::new("sample", &plan);
    for (role, path) in &inputs {
        stage = stage.input(role, path);
    }
    stage
        .output("pairs", &out)
        .output("metadata", &meta_path)
        .write(&parent_dir(&out))?;

    let mut stdout = std::io::stdout().lock();
    writeln!(
        stdout,
        "sampled {} pairs ({} relevant, {} non-relevant) -> {}",
        pairs.len(),
        positives,
        pairs.len() - positives,
        out.display()
    )?;
    Ok(())
}
