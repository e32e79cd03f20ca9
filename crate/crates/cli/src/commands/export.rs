use std::io::Write;
use std::path::PathBuf;

use anyhow::Context;
use clap::{ArgGroup, Args};
use exaranker::augment::{export_finetune, read_examples_jsonl, SourceFormat, DEFAULT_SOURCE_FORMAT};
use exaranker::prompt::PromptTemplate;
use serde_json::json;

use super::{create, open};
use crate::config::{input_file, output_path, required, usage, ConfigFile};
use crate::manifest::{parent_dir, Stage};

#[derive(Args, Debug)]
#[command(group(ArgGroup::new("variant").required(true).args(["with_explanations", "labels_only"])))]
pub struct ExportArgs {
    /// Augmented examples JSONL.
    #[arg(long, value_name = "PATH")]
    examples: Option<PathBuf>,

    /// Targets are `"{label}. Explanation: {text}"` where an explanation exists.
    #[arg(long)]
    with_explanations: bool,

    /// Targets are the label token only.
    #[arg(long)]
    labels_only: bool,

    /// Source text format with `{query}` and `{passage}` placeholders.
    #[arg(long, value_name = "FORMAT")]
    source_format: Option<String>,

    /// Prompt template JSON whose label vocabulary names the target tokens.
    #[arg(long, value_name = "PATH")]
    template: Option<PathBuf>,

    /// Output JSONL (default `{output_dir}/finetune.jsonl` or `finetune_labels.jsonl`).
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
}

pub fn run(args: ExportArgs, config: &ConfigFile) -> anyhow::Result<()> {
    let paths = &config.paths;
    let examples_path = input_file(
        required(args.examples, paths.examples.clone(), "--examples", "paths.examples")?,
        "--examples",
    )?;
    let template_path = args
        .template
        .or_else(|| paths.template.clone())
        .map(|p| input_file(p, "--template"))
        .transpose()?;
    let template = match &template_path {
        Some(path) => PromptTemplate::load(path).map_err(|e| usage(format!("--template: {e}")))?,
        None => PromptTemplate::default_template(),
    };
    let source_text = args
        .source_format
        .or_else(|| config.export.source_format.clone())
        .unwrap_or_else(|| DEFAULT_SOURCE_FORMAT.to_string());
    let source = SourceFormat::new(&source_text).map_err(|e| usage(format!("--source-format: {e}")))?;
    let with_explanations = args.with_explanations;
    let default_name = if with_explanations { "finetune.jsonl" } else { "finetune_labels.jsonl" };
    let out = output_path(args.out, None, paths.output_dir.as_deref(), default_name, "--out")?;

    let examples = read_examples_jsonl(open(&examples_path)?)
        .with_context(|| format!("reading {}", examples_path.display()))?;
    let mut writer = create(&out)?;
    let summary = export_finetune(&examples, with_explanations, &source, &template.label_vocabulary, &mut writer)
        .with_context(|| format!("writing {}", out.display()))?;
    drop(writer);

    let stage_name = if with_explanations { "export_with_explanations" } else { "export_labels_only" };
    let resolved = json!({
        "with_explanations": with_explanations,
        "source_format": source_text,
        "label_vocabulary": template.label_vocabulary,
        "summary": summary,
    });
    let mut stage = Stage::new(stage_name, &resolved).input("examples", &examples_path);
    if let Some(path) = &template_path {
        stage = stage.input("template", path);
    }
    stage.output("finetune", &out).write(&parent_dir(&out))?;

    writeln!(
        std::io::stdout().lock(),
        "exported {} records ({} relevant, {} non-relevant, {} failed excluded) -> {}",
        summary.written,
        summary.positives,
        summary.negatives,
        summary.excluded_failed,
        out.display()
    )?;
    Ok(())
}
