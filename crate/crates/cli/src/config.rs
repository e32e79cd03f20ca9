//! Config file loading and flag/config resolution.

use std::fmt;
use std::path::{Path, PathBuf};

use exaranker::augment::Fallback;
use exaranker::eval::EvalConfig;
use exaranker::rerank::ScoreFailurePolicy;
use exaranker::sampler::NegativeSource;
use serde::{Deserialize, Serialize};

/// A bad flag, a missing input or an invalid config value. Exits with 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(message: impl Into<String>) -> anyhow::Error {
    UsageError(message.into()).into()
}

#[derive(Debug, Default, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub queries: Option<PathBuf>,
    pub collection: Option<PathBuf>,
    pub qrels: Option<PathBuf>,
    pub candidate_run: Option<PathBuf>,
    pub template: Option<PathBuf>,
    pub shots: Option<PathBuf>,
    pub pairs: Option<PathBuf>,
    pub examples: Option<PathBuf>,
    pub run: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Default, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleSection {
    pub n_pos: Option<usize>,
    pub n_neg: Option<usize>,
    pub negative_source: Option<NegativeSource>,
    pub positive_threshold: Option<u32>,
    pub candidate_depth: Option<usize>,
    pub with_title: Option<bool>,
}

#[derive(Debug, Default, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationSection {
    pub model_id: Option<String>,
    pub temperature: Option<f64>,
    pub max_output_tokens: Option<u32>,
    pub stop_sequences: Option<Vec<String>>,
}

#[derive(Debug, Default, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentSection {
    pub max_retries: Option<u32>,
    pub fallback: Option<Fallback>,
    pub max_in_flight: Option<usize>,
    pub nudge: Option<String>,
    pub timeout_secs: Option<f64>,
    pub http_retries: Option<u32>,
}

#[derive(Debug, Default, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScorerSection {
    pub base_url: Option<String>,
    pub timeout_secs: Option<f64>,
    pub max_in_flight: Option<usize>,
    pub batch_size: Option<usize>,
    pub on_failure: Option<ScoreFailurePolicy>,
    pub with_title: Option<bool>,
    pub http_retries: Option<u32>,
}

#[derive(Debug, Default, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExportSection {
    pub source_format: Option<String>,
}

/// One JSON document; every field optional. Flags win over the file.
#[derive(Debug, Default, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigFile {
    pub seed: Option<u64>,
    pub cache_dir: Option<PathBuf>,
    pub base_url: Option<String>,
    pub api_key_env: Option<String>,
    pub paths: Paths,
    pub sample: SampleSection,
    pub generation: GenerationSection,
    pub augment: AugmentSection,
    pub export: ExportSection,
    pub scorer: ScorerSection,
    pub eval: Option<EvalConfig>,
}

impl ConfigFile {
    /// Loads a config file. Relative paths inside it are taken relative to
    /// the file's own directory.
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| usage(format!("--config: cannot read {}: {e}", path.display())))?;
        let mut config: ConfigFile = serde_json::from_str(&text)
            .map_err(|e| usage(format!("--config: {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let p = &mut config.paths;
        for slot in [
            &mut p.queries,
            &mut p.collection,
            &mut p.qrels,
            &mut p.candidate_run,
            &mut p.template,
            &mut p.shots,
            &mut p.pairs,
            &mut p.examples,
            &mut p.run,
            &mut p.output_dir,
            &mut config.cache_dir,
        ] {
            if let Some(rel) = slot.as_mut().filter(|p| p.is_relative()) {
                *rel = base.join(&*rel);
            }
        }
        Ok(config)
    }
}

/// Flag value, else config value, else a usage error naming both.
pub fn required<T>(flag: Option<T>, config: Option<T>, name: &str, key: &str) -> anyhow::Result<T> {
    flag.or(config)
        .ok_or_else(|| usage(format!("missing {name} (or `{key}` in the config file)")))
}

/// Checks that an input path names an existing file.
pub fn input_file(path: PathBuf, name: &str) -> anyhow::Result<PathBuf> {
    if path.is_file() {
        Ok(path)
    } else {
        Err(usage(format!("{name}: no such file: {}", path.display())))
    }
}

/// Flag value, else config value, else `{output_dir}/{default_name}`.
pub fn output_path(
    flag: Option<PathBuf>,
    config: Option<PathBuf>,
    output_dir: Option<&Path>,
    default_name: &str,
    name: &str,
) -> anyhow::Result<PathBuf> {
    flag.or(config)
        .or_else(|| output_dir.map(|d| d.join(default_name)))
        .ok_or_else(|| usage(format!("missing {name} (or `paths.output_dir` in the config file)")))
}

pub fn eval_config(config: &ConfigFile) -> anyhow::Result<EvalConfig> {
    let eval = config.eval.clone().unwrap_or_default();
    eval.validate().map_err(|e| usage(format!("config `eval`: {e}")))?;
    Ok(eval)
}
