use std::io::Write;
use std::path::PathBuf;

use anyhow::Context;
use clap::Args;
use exaranker::eval::{ndcg_at_k, round3, EvalError};
use serde_json::json;

use super::{load_qrels, load_run};
use crate::config::{eval_config, input_file, output_path, required, usage, ConfigFile};
use crate::manifest::{parent_dir, write_atomic, Stage};

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// TREC run to evaluate.
    #[arg(long, value_name = "PATH")]
    run: Option<PathBuf>,

    /// TREC qrels.
    #[arg(long, value_name = "PATH")]
    qrels: Option<PathBuf>,

    /// Rank cutoff (default 10).
    #[arg(long)]
    k: Option<usize>,

    /// Dataset id recorded in the report (default: run file stem).
    #[arg(long)]
    dataset_id: Option<String>,

    /// Also print one line per query.
    #[arg(long)]
    per_query: bool,

    /// Output MetricReport JSON (default `{output_dir}/metrics.json`).
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
}

pub fn run(args: EvalArgs, config: &ConfigFile) -> anyhow::Result<()> {
    let paths = &config.paths;
    let run_path = input_file(required(args.run, paths.run.clone(), "--run", "paths.run")?, "--run")?;
    let qrels_path = input_file(
        required(args.qrels, paths.qrels.clone(), "--qrels", "paths.qrels")?,
        "--qrels",
    )?;
    let k = args.k.unwrap_or(eval_config(config)?.k);
    let out = output_path(args.out, None, paths.output_dir.as_deref(), "metrics.json", "--out")?;
    let dataset_id = args.dataset_id.unwrap_or_else(|| {
        run_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "run".into())
    });

    let run = load_run(&run_path)?;
    let qrels = load_qrels(&qrels_path)?;
    let report = ndcg_at_k(&dataset_id, &run, &qrels, k).map_err(|e| match e {
        EvalError::InvalidCutoff => usage("--k must be >= 1"),
        other => anyhow::Error::new(other).context("evaluation failed"),
    })?;

    crate::manifest::ensure_parent(&out)?;
    write_atomic(&out, (serde_json::to_string_pretty(&report)? + "\n").as_bytes())
        .with_context(|| format!("writing {}", out.display()))?;
    Stage::new("eval", &json!({ "k": k, "dataset_id": dataset_id }))
        .input("run", &run_path)
        .input("qrels", &qrels_path)
        .output("report", &out)
        .write(&parent_dir(&out))?;

    let mut stdout = std::io::stdout().lock();
    let metric = format!("nDCG@{k}");
    let width = dataset_id.len().max("Dataset".len());
    writeln!(stdout, "{:<width$}  {:>7}  {:>8}", "Dataset", "Queries", metric)?;
    writeln!(stdout, "{:<width$}  {:>7}  {:>8.3}", report.dataset_id, report.n_queries, round3(report.mean))?;
    if args.per_query {
        writeln!(stdout)?;
        for (qid, value) in &report.per_query {
            writeln!(stdout, "{qid}\t{value:.4}")?;
        }
    }
    Ok(())
}
