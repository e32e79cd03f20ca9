use std::io::Write;
use std::path::PathBuf;
use std::sync::Arc;

use anyhow::Context;
use clap::{Args, ValueEnum};
use exaranker::augment::{augment, build_request, write_examples_jsonl, AugmentPolicy, Fallback};
use exaranker::llm::{ClientConfig, GenerationConfig, LlmClient, ResponseCache, RetryPolicy};
use exaranker::prompt::{default_shots, join_messages, load_shots, Format, PromptTemplate};
use exaranker::sampler::read_pairs_jsonl;
use serde::Serialize;
use serde_json::json;

use super::{create, open, runtime, secs};
use crate::config::{input_file, output_path, required, usage, ConfigFile};
use crate::manifest::{parent_dir, write_atomic, Stage};
use crate::Global;

pub const DEFAULT_API_KEY_ENV: &str = "EXARANKER_API_KEY";

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum FallbackArg {
    LabelOnly,
    Fail,
}

#[derive(Args, Debug)]
pub struct AugmentArgs {
    /// Sampled pairs JSONL.
    #[arg(long, value_name = "PATH")]
    pairs: Option<PathBuf>,

    /// Prompt template JSON (default: built-in template).
    #[arg(long, value_name = "PATH")]
    template: Option<PathBuf>,

    /// Few-shot examples JSON (default: built-in shots).
    #[arg(long, value_name = "PATH")]
    shots: Option<PathBuf>,

    /// Model id sent to the endpoint.
    #[arg(long)]
    model: Option<String>,

    /// Sampling temperature (default 0, greedy).
    #[arg(long)]
    temperature: Option<f64>,

    /// Output token cap (default 256).
    #[arg(long)]
    max_output_tokens: Option<u32>,

    /// Stop sequence; repeatable.
    #[arg(long = "stop", value_name = "TEXT")]
    stop: Vec<String>,

    /// Re-asks per pair after a rejected reply (default 2).
    #[arg(long)]
    max_retries: Option<u32>,

    /// What to do once re-asks run out (default label-only).
    #[arg(long, value_enum)]
    fallback: Option<FallbackArg>,

    /// Concurrent requests (default 8).
    #[arg(long)]
    max_in_flight: Option<usize>,

    /// Per-request timeout in seconds (default 120).
    #[arg(long)]
    timeout_secs: Option<f64>,

    /// HTTP-level retries for 429, 5xx and timeouts (default 5).
    #[arg(long)]
    http_retries: Option<u32>,

    /// Output JSONL (default `{output_dir}/examples.jsonl`).
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,

    /// Stats JSON (default `{out}.stats.json`).
    #[arg(long, value_name = "PATH")]
    stats: Option<PathBuf>,

    /// Print the first 3 rendered prompts and exit without network calls.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Serialize)]
struct Resolved<'a> {
    generation: &'a GenerationConfig,
    policy: &'a AugmentPolicy,
    base_url: &'a str,
    timeout_secs: f64,
    http_retries: u32,
    template: serde_json::Value,
    shots: usize,
}

pub fn run(args: AugmentArgs, global: &Global, config: &ConfigFile) -> anyhow::Result<()> {
    let paths = &config.paths;
    let section = &config.augment;
    let gen = &config.generation;
    let pairs_path = input_file(
        required(args.pairs, paths.pairs.clone(), "--pairs", "paths.pairs")?,
        "--pairs",
    )?;
    let template_path = args
        .template
        .or_else(|| paths.template.clone())
        .map(|p| input_file(p, "--template"))
        .transpose()?;
    let shots_path = args
        .shots
        .or_else(|| paths.shots.clone())
        .map(|p| input_file(p, "--shots"))
        .transpose()?;

    let template = match &template_path {
        Some(path) => PromptTemplate::load(path).map_err(|e| usage(format!("--template: {e}")))?,
        None => PromptTemplate::default_template(),
    };
    let shots = match &shots_path {
        Some(path) => load_shots(path, &template.label_vocabulary).map_err(|e| usage(format!("--shots: {e}")))?,
        None => default_shots(),
    };

    let model = args.model.or_else(|| gen.model_id.clone());
    let model = if args.dry_run {
        model.unwrap_or_else(|| "unset".into())
    } else {
        required(model, None, "--model", "generation.model_id")?
    };
    let mut generation = GenerationConfig::greedy(&model);
    generation.temperature = args.temperature.or(gen.temperature).unwrap_or(generation.temperature);
    generation.max_output_tokens = args
        .max_output_tokens
        .or(gen.max_output_tokens)
        .unwrap_or(generation.max_output_tokens);
    generation.stop_sequences = if args.stop.is_empty() {
        gen.stop_sequences.clone().unwrap_or_default()
    } else {
        args.stop
    };
    generation.validate().map_err(|e| usage(e.to_string()))?;

    let defaults = AugmentPolicy::default();
    let policy = AugmentPolicy {
        max_retries: args.max_retries.or(section.max_retries).unwrap_or(defaults.max_retries),
        fallback: args
            .fallback
            .map(|f| match f {
                FallbackArg::LabelOnly => Fallback::LabelOnly,
                FallbackArg::Fail => Fallback::Fail,
            })
            .or(section.fallback)
            .unwrap_or(defaults.fallback),
        max_in_flight: args.max_in_flight.or(section.max_in_flight).unwrap_or(defaults.max_in_flight),
        nudge: section.nudge.clone().unwrap_or(defaults.nudge),
    };
    if policy.max_in_flight == 0 {
        return Err(usage("--max-in-flight must be >= 1"));
    }
    let nudge = Format::parse("nudge", &policy.nudge, &["label"]).map_err(|e| usage(format!("augment.nudge: {e}")))?;

    let pairs = read_pairs_jsonl(open(&pairs_path)?).with_context(|| format!("reading {}", pairs_path.display()))?;

    if args.dry_run {
        let mut stdout = std::io::stdout().lock();
        for (i, pair) in pairs.iter().take(3).enumerate() {
            let request = build_request(&template, &shots, pair, &generation, &nudge, 0);
            writeln!(stdout, "===== prompt {} ({} / {}) =====", i + 1, pair.qid, pair.docid)?;
            writeln!(stdout, "{}", join_messages(request.system.as_deref(), &request.user))?;
        }
        return Ok(());
    }

    let out = output_path(args.out, paths.examples.clone(), paths.output_dir.as_deref(), "examples.jsonl", "--out")?;
    let stats_path = args.stats.unwrap_or_else(|| {
        let mut p = out.clone().into_os_string();
        p.push(".stats.json");
        PathBuf::from(p)
    });
    let base_url = required(global.base_url.clone(), config.base_url.clone(), "--base-url", "base_url")?;
    let key_var = global
        .api_key_env
        .clone()
        .or_else(|| config.api_key_env.clone())
        .unwrap_or_else(|| DEFAULT_API_KEY_ENV.into());
    let cache_dir = global
        .cache_dir
        .clone()
        .or_else(|| config.cache_dir.clone())
        .unwrap_or_else(|| parent_dir(&out).join("cache"));
    std::fs::create_dir_all(&cache_dir).with_context(|| format!("creating {}", cache_dir.display()))?;
    let cache_path = cache_dir.join("responses.jsonl");

    let timeout_secs = args.timeout_secs.or(section.timeout_secs).unwrap_or(120.0);
    let http_retries = args.http_retries.or(section.http_retries).unwrap_or(RetryPolicy::default().max_retries);
    let mut client_config = ClientConfig::new(&base_url);
    client_config.api_key = std::env::var(&key_var).ok().filter(|k| !k.is_empty());
    client_config.timeout = secs(timeout_secs, "--timeout-secs")?;
    client_config.retry.max_retries = http_retries;

    let resolved = Resolved {
        generation: &generation,
        policy: &policy,
        base_url: &base_url,
        timeout_secs,
        http_retries,
        template: serde_json::from_str(&template.to_json())?,
        shots: shots.len(),
    };

    let cache = ResponseCache::open(&cache_path).with_context(|| format!("opening cache {}", cache_path.display()))?;
    let client = LlmClient::new(client_config, Arc::new(cache))?;
    let (examples, stats) = runtime()?.block_on(augment(&pairs, &template, &shots, &client, &generation, &policy))?;

    let attempts = stats.total as u64 + stats.retries;
    if attempts > 0 && stats.request_errors == attempts {
        anyhow::bail!("every request to {base_url} failed; nothing written");
    }

    let mut writer = create(&out)?;
    write_examples_jsonl(&examples, &mut writer).with_context(|| format!("writing {}", out.display()))?;
    drop(writer);
    let client_stats = client.stats();
    let stats_doc = json!({ "augment": stats, "client": client_stats });
    write_atomic(&stats_path, (serde_json::to_string_pretty(&stats_doc)? + "\n").as_bytes())?;

    let mut stage = Stage::new("augment", &resolved).input("pairs", &pairs_path);
    if let Some(path) = &template_path {
        stage = stage.input("template", path);
    }
    if let Some(path) = &shots_path {
        stage = stage.input("shots", path);
    }
    stage.output("examples", &out).write(&parent_dir(&out))?;

    let mut stdout = std::io::stdout().lock();
    writeln!(
        stdout,
        "augmented {} pairs: {} ok, {} label-only, {} failed; {} re-asks, {} network calls, {} cache hits -> {}",
        stats.total,
        stats.ok,
        stats.fallback_label_only,
        stats.failed,
        stats.retries,
        client_stats.network_calls,
        client_stats.cache_hits,
        out.display()
    )?;
    Ok(())
}
