//! Readers and writers for the on-disk formats the pipeline consumes and produces.
//!
//! * MS MARCO style TSV: `qid<TAB>text` (queries) and `docid<TAB>text` (collection).
//! * BEIR style JSONL corpora: one `{"_id", "title"?, "text"}` object per line.
//! * TREC qrels: `qid 0 docid grade`.
//! * TREC runs: `qid Q0 docid rank score tag`.
//!
//! All text is normalized to NFC and stripped of CR/LF at parse time. TSV lines
//! are split on the first tab only, so any later tabs stay inside the text.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: duplicate query id {qid:?}")]
    DuplicateQuery { line: usize, qid: String },
    #[error("line {line}: conflicting grades for ({qid}, {docid}): {first} vs {second}")]
    ConflictingGrade {
        line: usize,
        qid: String,
        docid: String,
        first: u32,
        second: u32,
    },
    #[error("invalid run for query {qid:?}: {message}")]
    InvalidRun { qid: String, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = FormatError> = std::result::Result<T, E>;

fn malformed(line: usize, message: impl Into<String>) -> FormatError {
    FormatError::Malformed {
        line,
        message: message.into(),
    }
}

/// NFC-normalizes `raw` and removes every CR and LF.
pub fn normalize_text(raw: &str) -> String {
    raw.nfc().filter(|c| *c != '\r' && *c != '\n').collect()
}

fn is_valid_id(id: &str) -> bool {
    !id.is_empty() && !id.chars().any(char::is_whitespace)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Query {
    pub qid: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Passage {
    pub docid: String,
    pub text: String,
    pub title: Option<String>,
}

impl Passage {
    /// Text as shown to a model. With `with_title` set and a non-empty title
    /// present, returns `"{title}. {text}"`.
    pub fn display_text(&self, with_title: bool) -> String {
        match &self.title {
            Some(title) if with_title && !title.is_empty() => format!("{title}. {}", self.text),
            _ => self.text.clone(),
        }
    }
}

/// Iterates lines of a reader, yielding `(1-based line number, line)` with
/// the trailing newline removed.
struct NumberedLines<R> {
    reader: R,
    line_no: usize,
    buf: String,
}

impl<R: BufRead> NumberedLines<R> {
    fn new(reader: R) -> Self {
        Self {
            reader,
            line_no: 0,
            buf: String::new(),
        }
    }

    fn next_line(&mut self) -> Option<Result<(usize, &str)>> {
        self.buf.clear();
        match self.reader.read_line(&mut self.buf) {
            Ok(0) => None,
            Ok(_) => {
                self.line_no += 1;
                let line = self.buf.trim_end_matches(['\n', '\r']);
                Some(Ok((self.line_no, line)))
            }
            Err(err) => {
                self.line_no += 1;
                let line = self.line_no;
                Some(Err(if err.kind() == std::io::ErrorKind::InvalidData {
                    malformed(line, "invalid UTF-8")
                } else {
                    err.into()
                }))
            }
        }
    }
}

fn split_tsv(line_no: usize, line: &str) -> Result<(String, String)> {
    let (id, text) = line
        .split_once('\t')
        .ok_or_else(|| malformed(line_no, "expected `id<TAB>text`"))?;
    if !is_valid_id(id) {
        return Err(malformed(line_no, format!("invalid id {id:?}")));
    }
    let text = normalize_text(text);
    if text.is_empty() {
        return Err(malformed(line_no, "empty text"));
    }
    Ok((id.to_string(), text))
}

/// Parses a `qid<TAB>text` queries file. Blank lines are skipped.
pub fn parse_queries_tsv<R: BufRead>(reader: R) -> Result<Vec<Query>> {
    let mut lines = NumberedLines::new(reader);
    let mut seen = HashSet::new();
    let mut queries = Vec::new();
    while let Some(next) = lines.next_line() {
        let (line_no, line) = next?;
        if line.trim().is_empty() {
            continue;
        }
        let (qid, text) = split_tsv(line_no, line)?;
        if !seen.insert(qid.clone()) {
            return Err(FormatError::DuplicateQuery { line: line_no, qid });
        }
        queries.push(Query { qid, text });
    }
    Ok(queries)
}

/// Streaming reader over a `docid<TAB>text` collection.
pub struct CollectionTsv<R> {
    lines: NumberedLines<R>,
}

pub fn parse_collection_tsv<R: BufRead>(reader: R) -> CollectionTsv<R> {
    CollectionTsv {
        lines: NumberedLines::new(reader),
    }
}

impl<R: BufRead> Iterator for CollectionTsv<R> {
    type Item = Result<Passage>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let (line_no, line) = match self.lines.next_line()? {
                Ok(pair) => pair,
                Err(err) => return Some(Err(err)),
            };
            if line.trim().is_empty() {
                continue;
            }
            return Some(split_tsv(line_no, line).map(|(docid, text)| Passage {
                docid,
                text,
                title: None,
            }));
        }
    }
}

#[derive(Deserialize)]
struct BeirRecord {
    #[serde(rename = "_id")]
    id: Option<serde_json::Value>,
    text: Option<String>,
    title: Option<String>,
}

/// Streaming reader over a BEIR `corpus.jsonl`.
pub struct BeirCorpus<R> {
    lines: NumberedLines<R>,
}

pub fn parse_beir_corpus<R: BufRead>(reader: R) -> BeirCorpus<R> {
    BeirCorpus {
        lines: NumberedLines::new(reader),
    }
}

fn parse_beir_line(line_no: usize, line: &str) -> Result<Passage> {
    let record: BeirRecord = serde_json::from_str(line)
        .map_err(|err| malformed(line_no, format!("invalid JSON: {err}")))?;
    // BEIR ids are usually strings but a few corpora ship numeric ids.
    let docid = match record.id {
        Some(serde_json::Value::String(s)) => s,
        Some(serde_json::Value::Number(n)) => n.to_string(),
        Some(_) => return Err(malformed(line_no, "`_id` must be a string")),
        None => return Err(malformed(line_no, "missing field `_id`")),
    };
    if !is_valid_id(&docid) {
        return Err(malformed(line_no, format!("invalid id {docid:?}")));
    }
    let text = record
        .text
        .ok_or_else(|| malformed(line_no, "missing field `text`"))?;
    Ok(Passage {
        docid,
        text: normalize_text(&text),
        title: record.title.map(|t| normalize_text(&t)),
    })
}

impl<R: BufRead> Iterator for BeirCorpus<R> {
    type Item = Result<Passage>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let (line_no, line) = match self.lines.next_line()? {
                Ok(pair) => pair,
                Err(err) => return Some(Err(err)),
            };
            if line.trim().is_empty() {
                continue;
            }
            return Some(parse_beir_line(line_no, line));
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusFormat {
    /// `docid<TAB>text`
    Tsv,
    /// BEIR `corpus.jsonl`
    BeirJsonl,
}

impl CorpusFormat {
    /// `.jsonl` and `.json` files are BEIR corpora; anything else is TSV.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl" | "json") => CorpusFormat::BeirJsonl,
            _ => CorpusFormat::Tsv,
        }
    }
}

/// A collection on disk, re-read on every scan.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CollectionFile {
    pub path: PathBuf,
    pub format: CorpusFormat,
}

impl CollectionFile {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        let path = path.into();
        let format = CorpusFormat::from_path(&path);
        Self { path, format }
    }

    pub fn passages(&self) -> Result<Box<dyn Iterator<Item = Result<Passage>>>> {
        let reader = BufReader::new(File::open(&self.path)?);
        Ok(match self.format {
            CorpusFormat::Tsv => Box::new(parse_collection_tsv(reader)),
            CorpusFormat::BeirJsonl => Box::new(parse_beir_corpus(reader)),
        })
    }
}

/// Hex SHA-256 of a file's bytes.
pub fn file_sha256(path: &Path) -> std::io::Result<String> {
    let mut file = File::open(path)?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = file.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

/// Graded relevance judgments keyed by query then document.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Qrels {
    judgments: BTreeMap<String, BTreeMap<String, u32>>,
}

impl Qrels {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a judgment. Re-inserting an equal grade is a no-op; a
    /// different grade is rejected and the old one kept.
    pub fn insert(&mut self, qid: &str, docid: &str, grade: u32) -> Result<(), u32> {
        let docs = self.judgments.entry(qid.to_string()).or_default();
        match docs.get(docid) {
            Some(&existing) if existing != grade => Err(existing),
            Some(_) => Ok(()),
            None => {
                docs.insert(docid.to_string(), grade);
                Ok(())
            }
        }
    }

    /// `None` means unjudged, which is distinct from `Some(0)`.
    pub fn grade(&self, qid: &str, docid: &str) -> Option<u32> {
        self.judgments.get(qid)?.get(docid).copied()
    }

    pub fn judged_docs(&self, qid: &str) -> Option<&BTreeMap<String, u32>> {
        self.judgments.get(qid)
    }

    /// Query ids in sorted order.
    pub fn qids(&self) -> impl Iterator<Item = &str> {
        self.judgments.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str, u32)> {
        self.judgments.iter().flat_map(|(qid, docs)| {
            docs.iter()
                .map(move |(docid, grade)| (qid.as_str(), docid.as_str(), *grade))
        })
    }

    pub fn num_queries(&self) -> usize {
        self.judgments.len()
    }

    pub fn len(&self) -> usize {
        self.judgments.values().map(BTreeMap::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.judgments.is_empty()
    }
}

pub fn parse_qrels<R: BufRead>(reader: R) -> Result<Qrels> {
    let mut lines = NumberedLines::new(reader);
    let mut qrels = Qrels::new();
    while let Some(next) = lines.next_line() {
        let (line_no, line) = next?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        let [qid, _, docid, grade] = fields[..] else {
            return Err(malformed(
                line_no,
                format!("expected 4 columns, found {}", fields.len()),
            ));
        };
        let grade: u32 = grade
            .parse()
            .map_err(|_| malformed(line_no, format!("grade {grade:?} is not a non-negative integer")))?;
        qrels
            .insert(qid, docid, grade)
            .map_err(|first| FormatError::ConflictingGrade {
                line: line_no,
                qid: qid.to_string(),
                docid: docid.to_string(),
                first,
                second: grade,
            })?;
    }
    Ok(qrels)
}

/// Writes qrels as `qid 0 docid grade`, sorted by query then document.
pub fn write_qrels<W: Write>(qrels: &Qrels, mut out: W) -> Result<()> {
    for (qid, docid, grade) in qrels.iter() {
        writeln!(out, "{qid} 0 {docid} {grade}")?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrecRunEntry {
    pub qid: String,
    pub docid: String,
    pub rank: u32,
    pub score: f64,
    pub tag: String,
}

/// Checks the run invariants: per query, ranks are 1..n contiguous (in any
/// line order), docids unique, and scores finite and non-increasing with rank.
pub fn validate_run(entries: &[TrecRunEntry]) -> Result<()> {
    let mut by_query: HashMap<&str, Vec<&TrecRunEntry>> = HashMap::new();
    for entry in entries {
        let bad = |message: String| FormatError::InvalidRun {
            qid: entry.qid.clone(),
            message,
        };
        if !is_valid_id(&entry.qid) || !is_valid_id(&entry.docid) || !is_valid_id(&entry.tag) {
            return Err(bad("ids and tag must be non-empty without whitespace".into()));
        }
        if !entry.score.is_finite() {
            return Err(bad(format!("non-finite score for {}", entry.docid)));
        }
        by_query.entry(&entry.qid).or_default().push(entry);
    }
    for (qid, mut group) in by_query {
        group.sort_by_key(|e| e.rank);
        let mut docs = HashSet::new();
        for (i, entry) in group.iter().enumerate() {
            let bad = |message: String| FormatError::InvalidRun {
                qid: qid.to_string(),
                message,
            };
            let expected = i as u32 + 1;
            if entry.rank != expected {
                return Err(bad(format!("expected rank {expected}, found {}", entry.rank)));
            }
            if !docs.insert(entry.docid.as_str()) {
                return Err(bad(format!("duplicate docid {}", entry.docid)));
            }
            if i > 0 && entry.score > group[i - 1].score {
                return Err(bad(format!(
                    "score increases at rank {} ({} > {})",
                    entry.rank,
                    entry.score,
                    group[i - 1].score
                )));
            }
        }
    }
    Ok(())
}

/// Writes a run file. The whole run is validated before anything is written.
/// Lines come out in input order with scores at six fractional digits.
pub fn write_run<W: Write>(entries: &[TrecRunEntry], mut out: W) -> Result<()> {
    validate_run(entries)?;
    for e in entries {
        writeln!(out, "{} Q0 {} {} {:.6} {}", e.qid, e.docid, e.rank, e.score, e.tag)?;
    }
    out.flush()?;
    Ok(())
}

/// Parses a run file with any whitespace between columns. Rank/score
/// consistency is not enforced here; see [`validate_run`].
pub fn parse_run<R: BufRead>(reader: R) -> Result<Vec<TrecRunEntry>> {
    let mut lines = NumberedLines::new(reader);
    let mut entries = Vec::new();
    while let Some(next) = lines.next_line() {
        let (line_no, line) = next?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        let [qid, _, docid, rank, score, tag] = fields[..] else {
            return Err(malformed(
                line_no,
                format!("expected 6 columns, found {}", fields.len()),
            ));
        };
        let rank: u32 = rank
            .parse()
            .ok()
            .filter(|r| *r >= 1)
            .ok_or_else(|| malformed(line_no, format!("invalid rank {rank:?}")))?;
        let score: f64 = score
            .parse()
            .ok()
            .filter(|s: &f64| s.is_finite())
            .ok_or_else(|| malformed(line_no, format!("invalid score {score:?}")))?;
        entries.push(TrecRunEntry {
            qid: qid.to_string(),
            docid: docid.to_string(),
            rank,
            score,
            tag: tag.to_string(),
        });
    }
    Ok(entries)
}

/// First-stage candidates for one query, best first.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet {
    pub qid: String,
    pub candidates: Vec<(String, f64)>,
}

/// Groups a first-stage run into per-query candidate lists ordered by rank,
/// keeping at most `depth` per query (all when `None`). Queries keep their
/// first-appearance order. Duplicate docids keep their best-ranked entry.
pub fn candidates_from_run(entries: &[TrecRunEntry], depth: Option<usize>) -> Vec<CandidateSet> {
    let mut order: Vec<&str> = Vec::new();
    let mut groups: HashMap<&str, Vec<&TrecRunEntry>> = HashMap::new();
    for entry in entries {
        let group = groups.entry(&entry.qid).or_insert_with(|| {
            order.push(&entry.qid);
            Vec::new()
        });
        group.push(entry);
    }
    order
        .into_iter()
        .map(|qid| {
            let mut group = groups.remove(qid).unwrap_or_default();
            group.sort_by(|a, b| a.rank.cmp(&b.rank).then_with(|| a.docid.cmp(&b.docid)));
            let mut seen = HashSet::new();
            let mut candidates: Vec<(String, f64)> = group
                .into_iter()
                .filter(|e| seen.insert(e.docid.as_str()))
                .map(|e| (e.docid.clone(), e.score))
                .collect();
            if let Some(depth) = depth {
                candidates.truncate(depth);
            }
            CandidateSet {
                qid: qid.to_string(),
                candidates,
            }
        })
        .filter(|set| !set.candidates.is_empty())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(qid: &str, docid: &str, rank: u32, score: f64) -> TrecRunEntry {
        TrecRunEntry {
            qid: qid.into(),
            docid: docid.into(),
            rank,
            score,
            tag: "exa".into(),
        }
    }

    #[test]
    fn queries_split_on_first_tab() {
        let queries = parse_queries_tsv("7\thow tall is everest".as_bytes()).unwrap();
        assert_eq!(
            queries,
            vec![Query {
                qid: "7".into(),
                text: "how tall is everest".into()
            }]
        );
        assert!(parse_queries_tsv("".as_bytes()).unwrap().is_empty());
    }

    #[test]
    fn duplicate_query_reports_line() {
        let err = parse_queries_tsv("7\ta\n7\tb".as_bytes()).unwrap_err();
        assert!(matches!(err, FormatError::DuplicateQuery { line: 2, .. }), "{err}");
    }

    #[test]
    fn malformed_query_line() {
        let err = parse_queries_tsv("1\tok\nno tab here\n".as_bytes()).unwrap_err();
        assert!(matches!(err, FormatError::Malformed { line: 2, .. }), "{err}");
    }

    #[test]
    fn collection_keeps_extra_tabs() {
        let passages: Vec<_> = parse_collection_tsv("1020327\tEverest is 8849 m.\n5\ta\tb\tc\n".as_bytes())
            .collect::<Result<_>>()
            .unwrap();
        assert_eq!(passages[0].docid, "1020327");
        assert_eq!(passages[0].text, "Everest is 8849 m.");
        assert_eq!(passages[1].text, "a\tb\tc");
        assert_eq!(parse_collection_tsv("".as_bytes()).count(), 0);
    }

    #[test]
    fn text_is_nfc_and_cr_free() {
        // "e" + combining acute composes to a single code point.
        let passages: Vec<_> = parse_collection_tsv("d\tcafe\u{301}\r\n".as_bytes())
            .collect::<Result<_>>()
            .unwrap();
        assert_eq!(passages[0].text, "caf\u{e9}");
    }

    #[test]
    fn beir_lines() {
        let input = "{\"_id\":\"d1\",\"title\":\"T\",\"text\":\"body\"}\n{\"_id\":\"d2\",\"text\":\"body\"}\n";
        let passages: Vec<_> = parse_beir_corpus(input.as_bytes()).collect::<Result<_>>().unwrap();
        assert_eq!(passages[0].title.as_deref(), Some("T"));
        assert_eq!(passages[0].display_text(true), "T. body");
        assert_eq!(passages[0].display_text(false), "body");
        assert_eq!(passages[1].title, None);

        let err = parse_beir_corpus("{\"text\":\"body\"}".as_bytes()).next().unwrap().unwrap_err();
        assert!(err.to_string().contains("_id"), "{err}");
        let err = parse_beir_corpus("\n{not json".as_bytes()).next().unwrap().unwrap_err();
        assert!(matches!(err, FormatError::Malformed { line: 2, .. }), "{err}");
    }

    #[test]
    fn qrels_parse_and_unjudged() {
        let qrels = parse_qrels("q1 0 d1 2\nq1 0 d2 0\n23849 0 1020327 1\n".as_bytes()).unwrap();
        assert_eq!(qrels.grade("q1", "d1"), Some(2));
        assert_eq!(qrels.grade("q1", "d2"), Some(0));
        assert_eq!(qrels.grade("q1", "d3"), None);
        assert_eq!(qrels.grade("23849", "1020327"), Some(1));
        assert_eq!(qrels.len(), 3);
    }

    #[test]
    fn qrels_errors_and_dedup() {
        assert!(parse_qrels("q1 0 d1 x".as_bytes()).is_err());
        assert!(parse_qrels("q1 0 d1 -1".as_bytes()).is_err());
        let err = parse_qrels("q1 0 d1 1\nq1 0 d1 2".as_bytes()).unwrap_err();
        assert!(matches!(err, FormatError::ConflictingGrade { line: 2, .. }));
        let qrels = parse_qrels("q1 0 d1 1\nq1 0 d1 1".as_bytes()).unwrap();
        assert_eq!(qrels.len(), 1);
    }

    #[test]
    fn qrels_round_trip() {
        let qrels = parse_qrels("b 0 x 3\na 0 y 0\na 0 x 1\n".as_bytes()).unwrap();
        let mut buf = Vec::new();
        write_qrels(&qrels, &mut buf).unwrap();
        assert_eq!(parse_qrels(buf.as_slice()).unwrap(), qrels);
    }

    #[test]
    fn run_line_format() {
        let mut buf = Vec::new();
        write_run(&[entry("q1", "d1", 1, 0.987654)], &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "q1 Q0 d1 1 0.987654 exa\n");
    }

    #[test]
    fn run_rank_gap_rejected_before_output() {
        let mut buf = Vec::new();
        let err = write_run(&[entry("q1", "d1", 1, 0.9), entry("q1", "d2", 3, 0.8)], &mut buf).unwrap_err();
        assert!(matches!(err, FormatError::InvalidRun { .. }));
        assert!(buf.is_empty());
    }

    #[test]
    fn run_rejects_duplicates_and_increasing_scores() {
        assert!(validate_run(&[entry("q", "d1", 1, 0.9), entry("q", "d1", 2, 0.8)]).is_err());
        assert!(validate_run(&[entry("q", "d1", 1, 0.1), entry("q", "d2", 2, 0.8)]).is_err());
        assert!(validate_run(&[entry("q", "d1", 1, f64::NAN)]).is_err());
    }

    #[test]
    fn parse_run_tolerates_whitespace() {
        let entries = parse_run("q1  Q0\td1 1   0.5 tag\n\nq1 Q0 d2 2 0.25 tag\n".as_bytes()).unwrap();
        assert_eq!(entries.len(), 2);
        assert_eq!(entries[1].score, 0.25);
        assert!(parse_run("q1 Q0 d1 0 0.5 tag".as_bytes()).is_err());
        assert!(parse_run("q1 Q0 d1 1 nan tag".as_bytes()).is_err());
        assert!(parse_run("q1 Q0 d1 1".as_bytes()).is_err());
    }

    #[test]
    fn candidates_group_by_rank_with_depth() {
        let run = vec![
            entry("q2", "a", 2, 0.5),
            entry("q1", "x", 1, 0.9),
            entry("q2", "b", 1, 0.7),
            entry("q2", "c", 3, 0.1),
        ];
        let sets = candidates_from_run(&run, Some(2));
        assert_eq!(sets[0].qid, "q2");
        assert_eq!(sets[0].candidates, vec![("b".into(), 0.7), ("a".into(), 0.5)]);
        assert_eq!(sets[1].qid, "q1");
    }
}
