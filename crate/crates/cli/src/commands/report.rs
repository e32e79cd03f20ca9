use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::Args;
use exaranker::eval::{
    average_attempts, curves_csv, format_table, improvement_report, round3, ComparisonRow, MetricReport,
};
use serde::Deserialize;
use serde_json::json;

use super::open;
use crate::config::{eval_config, input_file, required, usage, ConfigFile};
use crate::manifest::{write_atomic, Stage};

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// JSON array of rows: `model_name`, `llm`, `ft_pos`, and either
    /// `dataset_means` or `reports` (MetricReport files). `avg_zs` overrides
    /// the computed zero-shot average.
    #[arg(long, value_name = "PATH")]
    rows: PathBuf,

    /// Model whose Avg ZS is compared (minuend of the per-size delta).
    #[arg(long, value_name = "MODEL", requires = "against")]
    compare: Option<String>,

    /// Baseline model (subtrahend of the per-size delta).
    #[arg(long, value_name = "MODEL", requires = "compare")]
    against: Option<String>,

    /// Directory for table.txt, curves.csv and improvement.json.
    #[arg(long, value_name = "DIR")]
    out_dir: Option<PathBuf>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RowSpec {
    model_name: String,
    #[serde(default)]
    llm: Option<String>,
    ft_pos: u64,
    #[serde(default)]
    dataset_means: BTreeMap<String, f64>,
    #[serde(default)]
    reports: Vec<PathBuf>,
    #[serde(default)]
    avg_zs: Option<f64>,
}

fn load_rows(path: &Path, config: &ConfigFile) -> anyhow::Result<(Vec<ComparisonRow>, Vec<PathBuf>)> {
    let specs: Vec<RowSpec> = serde_json::from_reader(open(path)?)
        .map_err(|e| usage(format!("--rows: {}: {e}", path.display())))?;
    let eval = eval_config(config)?;
    let base = path.parent().unwrap_or(Path::new(""));
    let mut report_files = Vec::new();
    let mut rows = Vec::with_capacity(specs.len());
    for spec in specs {
        let mut means = spec.dataset_means;
        for report in &spec.reports {
            let report_path = input_file(base.join(report), "--rows report")?;
            let metric: MetricReport = serde_json::from_reader(open(&report_path)?)
                .with_context(|| format!("reading {}", report_path.display()))?;
            means.insert(metric.dataset_id, metric.mean);
            report_files.push(report_path);
        }
        let mut row = ComparisonRow::from_means(&spec.model_name, spec.llm.as_deref(), spec.ft_pos, means, &eval)
            .with_context(|| format!("row {} / {}", spec.model_name, spec.ft_pos))?;
        if let Some(printed) = spec.avg_zs {
            row.avg_zs = printed;
        }
        rows.push(row);
    }
    Ok((rows, report_files))
}

pub fn run(args: ReportArgs, config: &ConfigFile) -> anyhow::Result<()> {
    let rows_path = input_file(args.rows, "--rows")?;
    let out_dir = required(args.out_dir, config.paths.output_dir.clone(), "--out-dir", "paths.output_dir")?;
    let eval = eval_config(config)?;
    let (rows, report_files) = load_rows(&rows_path, config)?;
    let rows = average_attempts(&rows);

    let table = format_table(&rows, &eval);
    let csv = curves_csv(&rows, &eval);
    std::fs::create_dir_all(&out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let table_path = out_dir.join("table.txt");
    let csv_path = out_dir.join("curves.csv");
    write_atomic(&table_path, table.as_bytes())?;
    write_atomic(&csv_path, csv.as_bytes())?;

    let mut stdout = std::io::stdout().lock();
    write!(stdout, "{table}")?;

    let mut stage = Stage::new(
        "report",
        &json!({ "compare": args.compare, "against": args.against, "eval": eval }),
    )
    .input("rows", &rows_path);
    for (i, path) in report_files.iter().enumerate() {
        stage = stage.input(&format!("report_{i}"), path);
    }
    stage = stage.output("table", &table_path).output("curves", &csv_path);

    if let (Some(a), Some(b)) = (&args.compare, &args.against) {
        let pick = |name: &str| -> Vec<ComparisonRow> { rows.iter().filter(|r| r.model_name == name).cloned().collect() };
        let (rows_a, rows_b) = (pick(a), pick(b));
        if rows_a.is_empty() || rows_b.is_empty() {
            let missing = if rows_a.is_empty() { a } else { b };
            return Err(usage(format!("no rows for model {missing:?}")));
        }
        let report = improvement_report(&rows_a, &rows_b).context("comparing models")?;
        let improvement_path = out_dir.join("improvement.json");
        write_atomic(&improvement_path, (serde_json::to_string_pretty(&report)? + "\n").as_bytes())?;
        stage = stage.output("improvement", &improvement_path);
        writeln!(stdout)?;
        writeln!(stdout, "{a} - {b} (Avg ZS):")?;
        for delta in &report.per_size {
            writeln!(stdout, "  {:>7}  {:+.3}", delta.ft_pos, round3(delta.delta))?;
        }
        writeln!(
            stdout,
            "  mean     {:+.4} ({:+.1} nDCG@{} points)",
            report.mean_delta,
            report.mean_delta_points(),
            eval.k
        )?;
    }
    stage.write(&out_dir)?;
    Ok(())
}
