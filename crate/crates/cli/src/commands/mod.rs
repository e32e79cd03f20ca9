pub mod augment;
pub mod eval;
pub mod export;
pub mod rerank;
pub mod report;
pub mod sample;

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use anyhow::Context;
use exaranker::corpus_io::{parse_qrels, parse_queries_tsv, parse_run, Qrels, Query, TrecRunEntry};

use crate::manifest::ensure_parent;

pub fn open(path: &Path) -> anyhow::Result<BufReader<File>> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(BufReader::new(file))
}

pub fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    ensure_parent(path)?;
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(file))
}

pub fn load_queries(path: &Path) -> anyhow::Result<Vec<Query>> {
    parse_queries_tsv(open(path)?).with_context(|| format!("reading queries {}", path.display()))
}

pub fn load_qrels(path: &Path) -> anyhow::Result<Qrels> {
    parse_qrels(open(path)?).with_context(|| format!("reading qrels {}", path.display()))
}

pub fn load_run(path: &Path) -> anyhow::Result<Vec<TrecRunEntry>> {
    parse_run(open(path)?).with_context(|| format!("reading run {}", path.display()))
}

pub fn runtime() -> anyhow::Result<tokio::runtime::Runtime> {
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .context("starting async runtime")
}

pub fn secs(value: f64, name: &str) -> anyhow::Result<std::time::Duration> {
    std::time::Duration::try_from_secs_f64(value)
        .ok()
        .filter(|d| !d.is_zero())
        .ok_or_else(|| crate::config::usage(format!("{name} must be a positive number of seconds")))
}
