//! nDCG@k evaluation and comparison reports.
//!
//! nDCG follows trec_eval's `ndcg_cut`: linear gain `grade / log2(rank + 1)`,
//! documents ordered by score descending then docid descending (the rank
//! column of the run is ignored), ideal DCG over all judged grades of the
//! query, and nDCG 0 when the ideal DCG is 0. Every query in the qrels is
//! evaluated; one missing from the run scores 0, like `trec_eval -c`.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus_io::{Qrels, TrecRunEntry};
use crate::rerank::ranking_order;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("cutoff k must be >= 1")]
    InvalidCutoff,
    #[error("qrels contain no queries")]
    NoQueries,
    #[error("missing zero-shot dataset {0:?}")]
    MissingDataset(String),
    #[error("checkpoint history is empty")]
    EmptyHistory,
    #[error("no matching row with Ft Pos. {0}")]
    UnmatchedSize(u64),
    #[error("invalid evaluation config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub k: usize,
    pub validation_dataset_id: String,
    pub zero_shot_dataset_ids: Vec<String>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            k: 10,
            validation_dataset_id: "dl20".into(),
            zero_shot_dataset_ids: ["robust04", "trec-covid", "dbpedia", "fiqa", "trec-news", "nfcorpus"]
                .map(String::from)
                .to_vec(),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.k == 0 {
            return Err(EvalError::InvalidCutoff);
        }
        if self.zero_shot_dataset_ids.contains(&self.validation_dataset_id) {
            return Err(EvalError::InvalidConfig(format!(
                "validation dataset {:?} is also listed as zero-shot",
                self.validation_dataset_id
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub dataset_id: String,
    pub k: usize,
    pub per_query: BTreeMap<String, f64>,
    pub mean: f64,
    pub n_queries: usize,
}

/// DCG of a gain sequence already in rank order, cut at `k`.
pub fn dcg_at_k(gains: impl IntoIterator<Item = u32>, k: usize) -> f64 {
    gains
        .into_iter()
        .take(k)
        .enumerate()
        .map(|(i, gain)| f64::from(gain) / ((i + 2) as f64).log2())
        .sum()
}

/// nDCG@k for one query given its ranked docids and judgments.
pub fn query_ndcg(ranked: &[&str], judged: &BTreeMap<String, u32>, k: usize) -> f64 {
    let mut ideal: Vec<u32> = judged.values().copied().collect();
    ideal.sort_unstable_by(|a, b| b.cmp(a));
    let idcg = dcg_at_k(ideal, k);
    if idcg == 0.0 {
        return 0.0;
    }
    let gains = ranked.iter().map(|d| judged.get(*d).copied().unwrap_or(0));
    dcg_at_k(gains, k) / idcg
}

pub fn ndcg_at_k(
    dataset_id: &str,
    run: &[TrecRunEntry],
    qrels: &Qrels,
    k: usize,
) -> Result<MetricReport, EvalError> {
    if k == 0 {
        return Err(EvalError::InvalidCutoff);
    }
    if qrels.is_empty() {
        return Err(EvalError::NoQueries);
    }
    let mut by_query: HashMap<&str, Vec<(&str, f64)>> = HashMap::new();
    for entry in run {
        by_query
            .entry(entry.qid.as_str())
            .or_default()
            .push((entry.docid.as_str(), entry.score));
    }
    let mut per_query = BTreeMap::new();
    for qid in qrels.qids() {
        let judged = qrels.judged_docs(qid).expect("qid comes from qrels");
        let value = match by_query.get_mut(qid) {
            Some(docs) => {
                docs.sort_by(|a, b| ranking_order(*a, *b));
                let mut seen = HashSet::new();
                let ranked: Vec<&str> = docs.iter().map(|(d, _)| *d).filter(|d| seen.insert(*d)).collect();
                query_ndcg(&ranked, judged, k)
            }
            None => 0.0,
        };
        per_query.insert(qid.to_string(), value);
    }
    // BTreeMap iteration fixes the summation order.
    let n_queries = per_query.len();
    let mean = per_query.values().sum::<f64>() / n_queries as f64;
    Ok(MetricReport {
        dataset_id: dataset_id.to_string(),
        k,
        per_query,
        mean,
        n_queries,
    })
}

/// Unweighted mean over the configured zero-shot datasets.
pub fn avg_zero_shot(means: &BTreeMap<String, f64>, config: &EvalConfig) -> Result<f64, EvalError> {
    let mut sum = 0.0;
    for id in &config.zero_shot_dataset_ids {
        sum += means
            .get(id)
            .ok_or_else(|| EvalError::MissingDataset(id.clone()))?;
    }
    Ok(sum / config.zero_shot_dataset_ids.len() as f64)
}

/// Epoch with the best validation score; the earliest wins a tie.
pub fn select_checkpoint(history: &[(u32, f64)]) -> Result<u32, EvalError> {
    let mut best: Option<(u32, f64)> = None;
    for &(epoch, score) in history {
        best = match best {
            Some((best_epoch, best_score))
                if score < best_score || (score == best_score && epoch >= best_epoch) =>
            {
                Some((best_epoch, best_score))
            }
            _ => Some((epoch, score)),
        };
    }
    best.map(|(epoch, _)| epoch).ok_or(EvalError::EmptyHistory)
}

/// Rounds to 3 decimals, halves away from zero. Values within 1e-9 of a
/// half step count as the half step, so 0.4745 computed as 0.47449999...
/// still rounds up.
pub fn round3(x: f64) -> f64 {
    let scaled = x * 1000.0;
    (scaled + scaled.signum() * 1e-9).round() / 1000.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub model_name: String,
    #[serde(default)]
    pub llm: Option<String>,
    /// Number of positive training examples.
    pub ft_pos: u64,
    /// Per-dataset mean nDCG, validation set included.
    pub dataset_means: BTreeMap<String, f64>,
    pub avg_zs: f64,
}

impl ComparisonRow {
    /// Builds a row whose `avg_zs` is the mean of its zero-shot datasets.
    pub fn from_means(
        model_name: &str,
        llm: Option<&str>,
        ft_pos: u64,
        dataset_means: BTreeMap<String, f64>,
        config: &EvalConfig,
    ) -> Result<Self, EvalError> {
        let avg_zs = avg_zero_shot(&dataset_means, config)?;
        Ok(Self {
            model_name: model_name.to_string(),
            llm: llm.map(str::to_string),
            ft_pos,
            dataset_means,
            avg_zs,
        })
    }

    /// Difference between the stored `avg_zs` and the recomputed mean. Rows
    /// copied from a published table carry the printed, rounded average.
    pub fn avg_zs_deviation(&self, config: &EvalConfig) -> Result<f64, EvalError> {
        Ok(self.avg_zs - avg_zero_shot(&self.dataset_means, config)?)
    }
}

/// Collapses repeated attempts (same model, LLM and size) into their mean.
/// Row order follows the first appearance of each group.
pub fn average_attempts(rows: &[ComparisonRow]) -> Vec<ComparisonRow> {
    let mut groups: Vec<(ComparisonRow, usize)> = Vec::new();
    for row in rows {
        let existing = groups.iter_mut().find(|(g, _)| {
            g.model_name == row.model_name && g.llm == row.llm && g.ft_pos == row.ft_pos
        });
        match existing {
            Some((group, count)) => {
                for (id, value) in &row.dataset_means {
                    *group.dataset_means.entry(id.clone()).or_default() += value;
                }
                group.avg_zs += row.avg_zs;
                *count += 1;
            }
            None => groups.push((row.clone(), 1)),
        }
    }
    groups
        .into_iter()
        .map(|(mut row, count)| {
            let n = count as f64;
            row.dataset_means.values_mut().for_each(|v| *v /= n);
            row.avg_zs /= n;
            row
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeDelta {
    pub ft_pos: u64,
    pub avg_zs_a: f64,
    pub avg_zs_b: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImprovementReport {
    pub per_size: Vec<SizeDelta>,
    pub mean_delta: f64,
}

impl ImprovementReport {
    /// Mean delta in nDCG points (x100).
    pub fn mean_delta_points(&self) -> f64 {
        self.mean_delta * 100.0
    }
}

/// `avg_zs(a) - avg_zs(b)` for each training size, in the order of `rows_a`.
pub fn improvement_report(rows_a: &[ComparisonRow], rows_b: &[ComparisonRow]) -> Result<ImprovementReport, EvalError> {
    if rows_a.len() != rows_b.len() {
        let a: HashSet<u64> = rows_a.iter().map(|r| r.ft_pos).collect();
        let b: HashSet<u64> = rows_b.iter().map(|r| r.ft_pos).collect();
        if let Some(size) = a.symmetric_difference(&b).min() {
            return Err(EvalError::UnmatchedSize(*size));
        }
    }
    let mut per_size = Vec::with_capacity(rows_a.len());
    for a in rows_a {
        let b = rows_b
            .iter()
            .find(|b| b.ft_pos == a.ft_pos)
            .ok_or(EvalError::UnmatchedSize(a.ft_pos))?;
        per_size.push(SizeDelta {
            ft_pos: a.ft_pos,
            avg_zs_a: a.avg_zs,
            avg_zs_b: b.avg_zs,
            delta: a.avg_zs - b.avg_zs,
        });
    }
    if let Some(extra) = rows_b.iter().find(|b| !rows_a.iter().any(|a| a.ft_pos == b.ft_pos)) {
        return Err(EvalError::UnmatchedSize(extra.ft_pos));
    }
    let mean_delta = if per_size.is_empty() {
        0.0
    } else {
        per_size.iter().map(|d| d.delta).sum::<f64>() / per_size.len() as f64
    };
    Ok(ImprovementReport { per_size, mean_delta })
}

/// Short column header for a dataset id.
pub fn dataset_label(id: &str) -> &str {
    match id {
        "dl20" => "DL 20",
        "robust04" => "Robust",
        "trec-covid" => "Covid",
        "dbpedia" | "dbpedia-entity" => "Dbp",
        "fiqa" => "FiQA",
        "trec-news" => "News",
        "nfcorpus" => "NFC",
        other => other,
    }
}

/// `15000` -> `15k`, `2500` -> `2.5k`, `400` -> `400`.
pub fn format_size(n: u64) -> String {
    if n >= 1000 && n.is_multiple_of(100) {
        let thousands = n as f64 / 1000.0;
        if n.is_multiple_of(1000) {
            format!("{}k", n / 1000)
        } else {
            format!("{thousands}k")
        }
    } else {
        n.to_string()
    }
}

fn fmt3(value: Option<f64>) -> String {
    value.map_or_else(|| "-".to_string(), |v| format!("{:.3}", round3(v)))
}

/// Aligned text table: Model, LLM, Ft Pos., the validation set, each
/// zero-shot dataset, then Avg ZS. Values print at 3 decimals.
pub fn format_table(rows: &[ComparisonRow], config: &EvalConfig) -> String {
    let mut header = vec!["Model".to_string(), "LLM".to_string(), "Ft Pos.".to_string()];
    let datasets: Vec<&String> = std::iter::once(&config.validation_dataset_id)
        .chain(&config.zero_shot_dataset_ids)
        .collect();
    header.extend(datasets.iter().map(|id| dataset_label(id).to_string()));
    header.push("Avg ZS".to_string());

    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|row| {
            let mut cells = vec![
                row.model_name.clone(),
                row.llm.clone().unwrap_or_else(|| "n/a".into()),
                format_size(row.ft_pos),
            ];
            cells.extend(datasets.iter().map(|id| fmt3(row.dataset_means.get(*id).copied())));
            cells.push(fmt3(Some(row.avg_zs)));
            cells
        })
        .collect();

    let widths: Vec<usize> = (0..header.len())
        .map(|c| {
            std::iter::once(&header)
                .chain(&body)
                .map(|r| r[c].chars().count())
                .max()
                .unwrap_or(0)
        })
        .collect();
    let mut out = String::new();
    for (i, row) in std::iter::once(&header).chain(&body).enumerate() {
        let line: Vec<String> = row
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(c, (cell, w))| if c < 2 { format!("{cell:<w$}") } else { format!("{cell:>w$}") })
            .collect();
        let _ = writeln!(out, "{}", line.join("  ").trim_end());
        if i == 0 {
            let _ = writeln!(out, "{}", "-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
        }
    }
    out
}

/// CSV with one row per model and size, for plotting nDCG against training size.
pub fn curves_csv(rows: &[ComparisonRow], config: &EvalConfig) -> String {
    let mut out = String::from("model,llm,ft_pos");
    let datasets: Vec<&String> = std::iter::once(&config.validation_dataset_id)
        .chain(&config.zero_shot_dataset_ids)
        .collect();
    for id in &datasets {
        out.push(',');
        out.push_str(id);
    }
    out.push_str(",avg_zs\n");
    for row in rows {
        let _ = write!(
            out,
            "{},{},{}",
            row.model_name,
            row.llm.as_deref().unwrap_or(""),
            row.ft_pos
        );
        for id in &datasets {
            out.push(',');
            if let Some(v) = row.dataset_means.get(*id) {
                let _ = write!(out, "{v:.6}");
            }
        }
        let _ = writeln!(out, ",{:.6}", row.avg_zs);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(qid: &str, docs: &[(&str, f64)]) -> Vec<TrecRunEntry> {
        docs.iter()
            .enumerate()
            .map(|(i, (d, s))| TrecRunEntry {
                qid: qid.into(),
                docid: d.to_string(),
                rank: i as u32 + 1,
                score: *s,
                tag: "t".into(),
            })
            .collect()
    }

    fn qrels(rows: &[(&str, &str, u32)]) -> Qrels {
        let mut q = Qrels::new();
        for (qid, d, g) in rows {
            q.insert(qid, d, *g).unwrap();
        }
        q
    }

    #[test]
    fn perfect_ranking_is_one() {
        let r = ndcg_at_k("x", &run("q", &[("d1", 2.0), ("d2", 1.0)]), &qrels(&[("q", "d1", 1)]), 10).unwrap();
        assert_eq!(r.mean, 1.0);
    }

    #[test]
    fn relevant_at_rank_two() {
        let r = ndcg_at_k("x", &run("q", &[("d2", 2.0), ("d1", 1.0)]), &qrels(&[("q", "d1", 1)]), 10).unwrap();
        let expected = 1.0 / 3f64.log2();
        assert!((r.mean - expected).abs() < 1e-12);
        assert!((r.mean - 0.6309).abs() < 1e-4);
    }

    #[test]
    fn all_zero_grades_give_zero() {
        let r = ndcg_at_k("x", &run("q", &[("d1", 1.0)]), &qrels(&[("q", "d1", 0), ("q", "d2", 0)]), 10).unwrap();
        assert_eq!(r.mean, 0.0);
    }

    #[test]
    fn missing_and_extra_queries() {
        let mut entries = run("q1", &[("d1", 1.0)]);
        entries.extend(run("unjudged", &[("d1", 1.0)]));
        let r = ndcg_at_k("x", &entries, &qrels(&[("q1", "d1", 1), ("q2", "d1", 1)]), 10).unwrap();
        assert_eq!(r.n_queries, 2);
        assert_eq!(r.per_query["q2"], 0.0);
        assert_eq!(r.mean, 0.5);
        assert!(!r.per_query.contains_key("unjudged"));
    }

    #[test]
    fn rank_column_is_ignored() {
        let mut entries = run("q", &[("d1", 0.1), ("d2", 0.9)]);
        entries[0].rank = 1;
        entries[1].rank = 2;
        let r = ndcg_at_k("x", &entries, &qrels(&[("q", "d2", 1)]), 10).unwrap();
        assert_eq!(r.mean, 1.0);
    }

    #[test]
    fn cutoff_applies_to_both_sides() {
        let entries = run("q", &[("a", 3.0), ("b", 2.0), ("c", 1.0)]);
        let r = ndcg_at_k("x", &entries, &qrels(&[("q", "c", 1), ("q", "b", 1)]), 1).unwrap();
        assert_eq!(r.mean, 0.0);
        assert_eq!(ndcg_at_k("x", &entries, &qrels(&[("q", "a", 1)]), 0), Err(EvalError::InvalidCutoff));
    }

    #[test]
    fn checkpoint_selection() {
        assert_eq!(select_checkpoint(&[(1, 0.60), (2, 0.66), (3, 0.64)]), Ok(2));
        assert_eq!(select_checkpoint(&[(1, 0.66), (2, 0.66)]), Ok(1));
        assert_eq!(select_checkpoint(&[(2, 0.66), (1, 0.66)]), Ok(1));
        assert_eq!(select_checkpoint(&[(7, 0.1)]), Ok(7));
        assert_eq!(select_checkpoint(&[]), Err(EvalError::EmptyHistory));
    }

    #[test]
    fn rounding_is_half_away_from_zero() {
        assert_eq!(round3(0.4745), 0.475);
        assert_eq!(round3(0.47449), 0.474);
        assert_eq!(round3(-0.0005), -0.001);
        assert_eq!(round3(0.4768333), 0.477);
    }

    #[test]
    fn avg_zero_shot_needs_all_datasets() {
        let config = EvalConfig::default();
        let mut means: BTreeMap<String, f64> =
            config.zero_shot_dataset_ids.iter().map(|id| (id.clone(), 0.5)).collect();
        assert_eq!(avg_zero_shot(&means, &config), Ok(0.5));
        means.remove("fiqa");
        assert_eq!(avg_zero_shot(&means, &config), Err(EvalError::MissingDataset("fiqa".into())));
    }

    #[test]
    fn config_rejects_validation_in_zero_shot() {
        let mut config = EvalConfig::default();
        config.zero_shot_dataset_ids.push("dl20".into());
        assert!(config.validate().is_err());
    }

    #[test]
    fn sizes_format_like_tables() {
        assert_eq!(format_size(15000), "15k");
        assert_eq!(format_size(2500), "2.5k");
        assert_eq!(format_size(300_000), "300k");
        assert_eq!(format_size(123), "123");
    }

    fn row(model: &str, ft_pos: u64, avg: f64) -> ComparisonRow {
        ComparisonRow {
            model_name: model.into(),
            llm: None,
            ft_pos,
            dataset_means: BTreeMap::new(),
            avg_zs: avg,
        }
    }

    #[test]
    fn improvement_matches_by_size() {
        let a = vec![row("a", 15000, 0.477), row("a", 50000, 0.489)];
        let b = vec![row("b", 50000, 0.475), row("b", 15000, 0.466)];
        let report = improvement_report(&a, &b).unwrap();
        assert!((report.per_size[0].delta - 0.011).abs() < 1e-12);
        assert!((report.per_size[1].delta - 0.014).abs() < 1e-12);
        assert!((report.mean_delta - 0.0125).abs() < 1e-12);
        let err = improvement_report(&a, &b[..1]).unwrap_err();
        assert_eq!(err, EvalError::UnmatchedSize(15000));
        let same = improvement_report(&a, &a).unwrap();
        assert!(same.per_size.iter().all(|d| d.delta == 0.0));
    }

    #[test]
    fn attempts_are_averaged() {
        let mut r1 = row("m", 15000, 0.4);
        r1.dataset_means.insert("fiqa".into(), 0.3);
        let mut r2 = row("m", 15000, 0.5);
        r2.dataset_means.insert("fiqa".into(), 0.5);
        let avg = average_attempts(&[r1, r2, row("n", 15000, 0.1)]);
        assert_eq!(avg.len(), 2);
        assert!((avg[0].avg_zs - 0.45).abs() < 1e-12);
        assert!((avg[0].dataset_means["fiqa"] - 0.4).abs() < 1e-12);
    }

    #[test]
    fn table_layout() {
        let config = EvalConfig::default();
        let means: BTreeMap<String, f64> = [
            ("dl20", 0.656),
            ("robust04", 0.523),
            ("trec-covid", 0.746),
            ("dbpedia", 0.392),
            ("fiqa", 0.382),
            ("trec-news", 0.409),
            ("nfcorpus", 0.344),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        let r = ComparisonRow::from_means("monoT5", None, 15000, means, &config).unwrap();
        let table = format_table(std::slice::from_ref(&r), &config);
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(
            lines[0].split_whitespace().collect::<Vec<_>>().join(" "),
            "Model LLM Ft Pos. DL 20 Robust Covid Dbp FiQA News NFC Avg ZS"
        );
        assert_eq!(
            lines[2].split_whitespace().collect::<Vec<_>>(),
            ["monoT5", "n/a", "15k", "0.656", "0.523", "0.746", "0.392", "0.382", "0.409", "0.344", "0.466"]
        );
        let csv = curves_csv(&[r], &config);
        assert!(csv.starts_with("model,llm,ft_pos,dl20,robust04,"));
        assert!(csv.lines().nth(1).unwrap().starts_with("monoT5,,15000,0.656000,"));
    }
}
