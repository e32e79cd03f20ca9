//! Balanced, seeded sampling of labeled (query, passage) pairs.
//!
//! Selection works on ids only and never looks at text, so the selection
//! order is a pure function of the sorted id pools and the seed:
//!
//! 1. Positives: every qrels pair with grade at or above the threshold.
//!    Query ids are shuffled, each query's positive docids are shuffled
//!    (queries visited in sorted order), and the pairs are taken round-robin
//!    over the shuffled queries: the first positive of every query, then the
//!    second of those that have one, and so on.
//! 2. Negatives come from a second stream (`seed ^ NEGATIVE_STREAM`) and are
//!    restricted to queries that have at least one positive. From a candidate
//!    run the per-query pool is the top-`depth` candidates minus judged
//!    positives, sorted by docid, and the pools are interleaved exactly like
//!    positives. From the collection, queries are shuffled and visited
//!    round-robin, each visit drawing uniform docids (rejecting judged
//!    positives and repeats) from the docid-sorted collection.
//!
//! Neither order depends on the requested counts, so a smaller sample is
//! always a prefix of a larger one with the same seed.
//!
//! Texts are attached afterwards in a single streaming pass over the
//! collection that retains only the selected passages.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus_io::{CandidateSet, CollectionFile, FormatError, Passage, Qrels, Query};
use crate::rng::SampleRng;

/// Xor mask deriving the negative-sampling stream from the plan seed.
pub const NEGATIVE_STREAM: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Relevant,
    NonRelevant,
}

impl Label {
    pub fn is_relevant(self) -> bool {
        self == Label::Relevant
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Relevant => "relevant",
            Label::NonRelevant => "non_relevant",
        })
    }
}

pub fn binarize(grade: u32, threshold: u32) -> Label {
    if grade >= threshold {
        Label::Relevant
    } else {
        Label::NonRelevant
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledPair {
    pub qid: String,
    pub docid: String,
    #[serde(rename = "query")]
    pub query_text: String,
    #[serde(rename = "passage")]
    pub passage_text: String,
    pub label: Label,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeSource {
    CandidateRun,
    RandomCollection,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplePlan {
    pub n_pos: usize,
    pub n_neg: usize,
    pub seed: u64,
    pub negative_source: NegativeSource,
    /// Minimum qrels grade counted as relevant.
    #[serde(default = "default_threshold")]
    pub positive_threshold: u32,
    /// How many top candidates per query feed the negative pool.
    #[serde(default)]
    pub candidate_depth: Option<usize>,
    /// Prefix passage text with its title (`"{title}. {text}"`).
    #[serde(default)]
    pub with_title: bool,
}

fn default_threshold() -> u32 {
    1
}

impl SamplePlan {
    pub fn balanced(n: usize, seed: u64, negative_source: NegativeSource) -> Self {
        Self {
            n_pos: n,
            n_neg: n,
            seed,
            negative_source,
            positive_threshold: 1,
            candidate_depth: None,
            with_title: false,
        }
    }
}

#[derive(Debug, Error)]
pub enum SampleError {
    #[error("requested {requested} positives but only {available} are available")]
    InsufficientPositives { requested: usize, available: usize },
    #[error("requested {requested} negatives but only {available} are available")]
    InsufficientNegatives { requested: usize, available: usize },
    #[error("qrels reference queries missing from the queries file: {}", .0.join(", "))]
    MissingQueries(Vec<String>),
    #[error("selected passages missing from the collection: {}", .0.join(", "))]
    MissingPassages(Vec<String>),
    #[error("negative source `candidate_run` needs a candidate run")]
    MissingCandidateRun,
    #[error("positive threshold must be at least 1")]
    InvalidThreshold,
    #[error(transparent)]
    Format(#[from] FormatError),
}

/// A collection that can be scanned more than once.
pub trait PassageSource {
    fn scan(&self) -> Result<Box<dyn Iterator<Item = Result<Passage, FormatError>> + '_>, FormatError>;
}

impl PassageSource for [Passage] {
    fn scan(&self) -> Result<Box<dyn Iterator<Item = Result<Passage, FormatError>> + '_>, FormatError> {
        Ok(Box::new(self.iter().cloned().map(Ok)))
    }
}

impl PassageSource for Vec<Passage> {
    fn scan(&self) -> Result<Box<dyn Iterator<Item = Result<Passage, FormatError>> + '_>, FormatError> {
        self.as_slice().scan()
    }
}

impl PassageSource for CollectionFile {
    fn scan(&self) -> Result<Box<dyn Iterator<Item = Result<Passage, FormatError>> + '_>, FormatError> {
        self.passages()
    }
}

/// A selected (qid, docid, label) triple before texts are attached.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Selection {
    pub qid: String,
    pub docid: String,
    pub label: Label,
}

/// Round-robin interleave over per-query pools visited in `order`.
fn interleave(order: &[String], pools: &BTreeMap<String, Vec<String>>, limit: usize) -> Vec<(String, String)> {
    let mut out = Vec::with_capacity(limit);
    let mut round = 0;
    while out.len() < limit {
        let mut progressed = false;
        for qid in order {
            if out.len() == limit {
                break;
            }
            if let Some(docid) = pools[qid].get(round) {
                out.push((qid.clone(), docid.clone()));
                progressed = true;
            }
        }
        if !progressed {
            break;
        }
        round += 1;
    }
    out
}

/// Shuffles query order, then each pool in sorted query order, then interleaves.
fn shuffled_interleave(
    rng: &mut SampleRng,
    mut pools: BTreeMap<String, Vec<String>>,
    limit: usize,
) -> Vec<(String, String)> {
    let mut order: Vec<String> = pools.keys().cloned().collect();
    rng.shuffle(&mut order);
    for pool in pools.values_mut() {
        rng.shuffle(pool);
    }
    interleave(&order, &pools, limit)
}

fn positive_pools(qrels: &Qrels, threshold: u32) -> BTreeMap<String, Vec<String>> {
    let mut pools: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for (qid, docid, grade) in qrels.iter() {
        if binarize(grade, threshold).is_relevant() {
            pools.entry(qid.to_string()).or_default().push(docid.to_string());
        }
    }
    pools
}

fn is_positive(qrels: &Qrels, qid: &str, docid: &str, threshold: u32) -> bool {
    qrels
        .grade(qid, docid)
        .is_some_and(|g| binarize(g, threshold).is_relevant())
}

/// Chooses which (qid, docid, label) triples to sample. Positives come first
/// in selection order, followed by negatives in selection order.
pub fn select_pairs(
    query_ids: &HashSet<&str>,
    collection: &dyn PassageSource,
    qrels: &Qrels,
    candidate_runs: Option<&[CandidateSet]>,
    plan: &SamplePlan,
) -> Result<Vec<Selection>, SampleError> {
    if plan.positive_threshold == 0 {
        return Err(SampleError::InvalidThreshold);
    }
    let threshold = plan.positive_threshold;
    let pools = positive_pools(qrels, threshold);

    let missing: Vec<String> = pools
        .keys()
        .filter(|qid| !query_ids.contains(qid.as_str()))
        .cloned()
        .collect();
    if !missing.is_empty() {
        return Err(SampleError::MissingQueries(missing));
    }

    let available: usize = pools.values().map(Vec::len).sum();
    if plan.n_pos > available {
        return Err(SampleError::InsufficientPositives {
            requested: plan.n_pos,
            available,
        });
    }
    let positive_qids: Vec<String> = pools.keys().cloned().collect();

    let mut pos_rng = SampleRng::new(plan.seed);
    let positives = shuffled_interleave(&mut pos_rng, pools, plan.n_pos);

    let mut neg_rng = SampleRng::new(plan.seed ^ NEGATIVE_STREAM);
    let negatives = match plan.negative_source {
        NegativeSource::CandidateRun => {
            let runs = candidate_runs.ok_or(SampleError::MissingCandidateRun)?;
            candidate_negatives(&mut neg_rng, &positive_qids, runs, qrels, plan)?
        }
        NegativeSource::RandomCollection => {
            collection_negatives(&mut neg_rng, &positive_qids, collection, qrels, plan)?
        }
    };

    let label = |label| move |(qid, docid): (String, String)| Selection { qid, docid, label };
    Ok(positives
        .into_iter()
        .map(label(Label::Relevant))
        .chain(negatives.into_iter().map(label(Label::NonRelevant)))
        .collect())
}

fn candidate_negatives(
    rng: &mut SampleRng,
    positive_qids: &[String],
    runs: &[CandidateSet],
    qrels: &Qrels,
    plan: &SamplePlan,
) -> Result<Vec<(String, String)>, SampleError> {
    let eligible: HashSet<&str> = positive_qids.iter().map(String::as_str).collect();
    let mut pools: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for set in runs.iter().filter(|s| eligible.contains(s.qid.as_str())) {
        let depth = plan.candidate_depth.unwrap_or(usize::MAX);
        let pool = pools.entry(set.qid.clone()).or_default();
        pool.extend(
            set.candidates
                .iter()
                .take(depth)
                .map(|(docid, _)| docid)
                .filter(|docid| !is_positive(qrels, &set.qid, docid, plan.positive_threshold))
                .cloned(),
        );
    }
    for pool in pools.values_mut() {
        pool.sort_unstable();
        pool.dedup();
    }
    pools.retain(|_, pool| !pool.is_empty());
    let available: usize = pools.values().map(Vec::len).sum();
    if plan.n_neg > available {
        return Err(SampleError::InsufficientNegatives {
            requested: plan.n_neg,
            available,
        });
    }
    Ok(shuffled_interleave(rng, pools, plan.n_neg))
}

fn collection_negatives(
    rng: &mut SampleRng,
    positive_qids: &[String],
    collection: &dyn PassageSource,
    qrels: &Qrels,
    plan: &SamplePlan,
) -> Result<Vec<(String, String)>, SampleError> {
    if plan.n_neg == 0 {
        return Ok(Vec::new());
    }
    let mut universe = Vec::new();
    for passage in collection.scan()? {
        universe.push(passage?.docid);
    }
    universe.sort_unstable();
    universe.dedup();
    let in_universe: HashSet<&str> = universe.iter().map(String::as_str).collect();

    // Per-query capacity: collection size minus that query's positives present in it.
    let capacity: Vec<usize> = positive_qids
        .iter()
        .map(|qid| {
            let positives = qrels.judged_docs(qid).map_or(0, |docs| {
                docs.iter()
                    .filter(|(docid, grade)| {
                        binarize(**grade, plan.positive_threshold).is_relevant()
                            && in_universe.contains(docid.as_str())
                    })
                    .count()
            });
            universe.len() - positives
        })
        .collect();
    let available: usize = capacity.iter().sum();
    if plan.n_neg > available {
        return Err(SampleError::InsufficientNegatives {
            requested: plan.n_neg,
            available,
        });
    }

    let mut order: Vec<usize> = (0..positive_qids.len()).collect();
    rng.shuffle(&mut order);
    let mut drawn: Vec<HashSet<usize>> = vec![HashSet::new(); positive_qids.len()];
    let mut out = Vec::with_capacity(plan.n_neg);
    let n = universe.len() as u64;
    'rounds: loop {
        for &q in &order {
            if out.len() == plan.n_neg {
                break 'rounds;
            }
            if drawn[q].len() == capacity[q] {
                continue;
            }
            let qid = &positive_qids[q];
            loop {
                let idx = rng.below(n) as usize;
                if drawn[q].contains(&idx)
                    || is_positive(qrels, qid, &universe[idx], plan.positive_threshold)
                {
                    continue;
                }
                drawn[q].insert(idx);
                out.push((qid.clone(), universe[idx].clone()));
                break;
            }
        }
    }
    Ok(out)
}

/// Attaches query and passage texts to a selection with one pass over the
/// collection, keeping only the passages that were selected.
pub fn materialize(
    selection: &[Selection],
    queries: &[Query],
    collection: &dyn PassageSource,
    with_title: bool,
) -> Result<Vec<LabeledPair>, SampleError> {
    let query_text: HashMap<&str, &str> = queries
        .iter()
        .map(|q| (q.qid.as_str(), q.text.as_str()))
        .collect();
    let mut wanted: HashMap<&str, Option<String>> =
        selection.iter().map(|s| (s.docid.as_str(), None)).collect();
    if !wanted.is_empty() {
        for passage in collection.scan()? {
            let passage = passage?;
            if let Some(slot) = wanted.get_mut(passage.docid.as_str()) {
                if slot.is_none() {
                    *slot = Some(passage.display_text(with_title));
                }
            }
        }
    }
    let mut missing: Vec<String> = wanted
        .iter()
        .filter(|(_, text)| text.is_none())
        .map(|(docid, _)| docid.to_string())
        .collect();
    if !missing.is_empty() {
        missing.sort_unstable();
        return Err(SampleError::MissingPassages(missing));
    }
    selection
        .iter()
        .map(|s| {
            let query_text = query_text
                .get(s.qid.as_str())
                .ok_or_else(|| SampleError::MissingQueries(vec![s.qid.clone()]))?;
            Ok(LabeledPair {
                qid: s.qid.clone(),
                docid: s.docid.clone(),
                query_text: query_text.to_string(),
                passage_text: wanted[s.docid.as_str()].clone().unwrap_or_default(),
                label: s.label,
            })
        })
        .collect()
}

/// Samples exactly `plan.n_pos` relevant and `plan.n_neg` non-relevant pairs.
pub fn sample_pairs(
    queries: &[Query],
    collection: &dyn PassageSource,
    qrels: &Qrels,
    candidate_runs: Option<&[CandidateSet]>,
    plan: &SamplePlan,
) -> Result<Vec<LabeledPair>, SampleError> {
    let query_ids: HashSet<&str> = queries.iter().map(|q| q.qid.as_str()).collect();
    let selection = select_pairs(&query_ids, collection, qrels, candidate_runs, plan)?;
    materialize(&selection, queries, collection, plan.with_title)
}

pub fn write_pairs_jsonl<W: Write>(pairs: &[LabeledPair], mut out: W) -> std::io::Result<()> {
    for pair in pairs {
        serde_json::to_writer(&mut out, pair)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

pub fn read_pairs_jsonl<R: BufRead>(reader: R) -> Result<Vec<LabeledPair>, FormatError> {
    read_jsonl(reader)
}

/// Reads one JSON value per non-blank line.
pub fn read_jsonl<T: serde::de::DeserializeOwned, R: BufRead>(reader: R) -> Result<Vec<T>, FormatError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|err| FormatError::Malformed {
            line: i + 1,
            message: err.to_string(),
        })?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binarize_threshold() {
        assert_eq!(binarize(1, 1), Label::Relevant);
        assert_eq!(binarize(0, 1), Label::NonRelevant);
        assert_eq!(binarize(2, 3), Label::NonRelevant);
    }

    #[test]
    fn interleave_prefers_one_per_query() {
        let pools: BTreeMap<String, Vec<String>> = [
            ("a".to_string(), vec!["a1".to_string(), "a2".to_string(), "a3".to_string()]),
            ("b".to_string(), vec!["b1".to_string()]),
            ("c".to_string(), vec!["c1".to_string(), "c2".to_string()]),
        ]
        .into_iter()
        .collect();
        let order = vec!["c".to_string(), "a".to_string(), "b".to_string()];
        let picked: Vec<String> = interleave(&order, &pools, 10).into_iter().map(|(_, d)| d).collect();
        assert_eq!(picked, ["c1", "a1", "b1", "c2", "a2", "a3"]);
        assert_eq!(interleave(&order, &pools, 2).len(), 2);
    }

    fn toy() -> (Vec<Query>, Vec<Passage>, Qrels) {
        let queries = (0..3)
            .map(|i| Query {
                qid: format!("q{i}"),
                text: format!("query {i}"),
            })
            .collect();
        let passages = (0..4)
            .map(|i| Passage {
                docid: format!("d{i}"),
                text: format!("passage {i}"),
                title: None,
            })
            .collect();
        let mut qrels = Qrels::new();
        qrels.insert("q0", "d0", 1).unwrap();
        qrels.insert("q1", "d1", 1).unwrap();
        qrels.insert("q1", "d2", 0).unwrap();
        (queries, passages, qrels)
    }

    #[test]
    fn empty_plan_gives_empty_sample() {
        let (queries, passages, qrels) = toy();
        let plan = SamplePlan::balanced(0, 42, NegativeSource::RandomCollection);
        assert!(sample_pairs(&queries, &passages, &qrels, None, &plan).unwrap().is_empty());
    }

    #[test]
    fn insufficient_positives_reports_counts() {
        let (queries, passages, qrels) = toy();
        let plan = SamplePlan::balanced(3, 1, NegativeSource::RandomCollection);
        let err = sample_pairs(&queries, &passages, &qrels, None, &plan).unwrap_err();
        assert!(matches!(
            err,
            SampleError::InsufficientPositives { requested: 3, available: 2 }
        ));
    }

    #[test]
    fn insufficient_negatives_reports_counts() {
        let (queries, passages, qrels) = toy();
        // Two positive queries, each with three non-positive docs.
        let mut plan = SamplePlan::balanced(1, 1, NegativeSource::RandomCollection);
        plan.n_neg = 7;
        let err = sample_pairs(&queries, &passages, &qrels, None, &plan).unwrap_err();
        assert!(matches!(
            err,
            SampleError::InsufficientNegatives { requested: 7, available: 6 }
        ));
        plan.n_neg = 6;
        let pairs = sample_pairs(&queries, &passages, &qrels, None, &plan).unwrap();
        assert_eq!(pairs.len(), 7);
    }

    #[test]
    fn missing_queries_are_listed() {
        let (queries, passages, mut qrels) = toy();
        qrels.insert("q9", "d0", 1).unwrap();
        let plan = SamplePlan::balanced(1, 1, NegativeSource::RandomCollection);
        let err = sample_pairs(&queries, &passages, &qrels, None, &plan).unwrap_err();
        assert!(matches!(err, SampleError::MissingQueries(ref ids) if ids == &["q9"]));
    }

    #[test]
    fn candidate_source_requires_run() {
        let (queries, passages, qrels) = toy();
        let plan = SamplePlan::balanced(1, 1, NegativeSource::CandidateRun);
        assert!(matches!(
            sample_pairs(&queries, &passages, &qrels, None, &plan),
            Err(SampleError::MissingCandidateRun)
        ));
    }

    #[test]
    fn candidate_negatives_exclude_positives_and_respect_depth() {
        let (queries, passages, qrels) = toy();
        let runs = vec![CandidateSet {
            qid: "q1".into(),
            candidates: vec![("d1".into(), 3.0), ("d2".into(), 2.0), ("d3".into(), 1.0)],
        }];
        let mut plan = SamplePlan::balanced(2, 5, NegativeSource::CandidateRun);
        plan.n_neg = 1;
        plan.candidate_depth = Some(2);
        let pairs = sample_pairs(&queries, &passages, &qrels, Some(&runs), &plan).unwrap();
        let negatives: Vec<_> = pairs.iter().filter(|p| !p.label.is_relevant()).collect();
        assert_eq!(negatives.len(), 1);
        assert_eq!((negatives[0].qid.as_str(), negatives[0].docid.as_str()), ("q1", "d2"));
        plan.n_neg = 2;
        assert!(matches!(
            sample_pairs(&queries, &passages, &qrels, Some(&runs), &plan),
            Err(SampleError::InsufficientNegatives { available: 1, .. })
        ));
    }

    #[test]
    fn missing_passage_text_is_an_error() {
        let (queries, mut passages, qrels) = toy();
        passages.retain(|p| p.docid != "d1");
        let plan = SamplePlan {
            n_neg: 0,
            ..SamplePlan::balanced(2, 3, NegativeSource::RandomCollection)
        };
        assert!(matches!(
            sample_pairs(&queries, &passages, &qrels, None, &plan),
            Err(SampleError::MissingPassages(ref ids)) if ids == &["d1"]
        ));
    }

    #[test]
    fn pairs_jsonl_round_trip() {
        let pair = LabeledPair {
            qid: "q".into(),
            docid: "d".into(),
            query_text: "what".into(),
            passage_text: "this".into(),
            label: Label::NonRelevant,
        };
        let mut buf = Vec::new();
        write_pairs_jsonl(std::slice::from_ref(&pair), &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf.clone()).unwrap(),
            "{\"qid\":\"q\",\"docid\":\"d\",\"query\":\"what\",\"passage\":\"this\",\"label\":\"non_relevant\"}\n"
        );
        assert_eq!(read_pairs_jsonl(buf.as_slice()).unwrap(), vec![pair]);
    }
}
