//! Explanation augmentation and fine-tuning export.
//!
//! Every sampled pair is sent to the LLM with the few-shot prompt. The reply
//! must start with the pair's known label; a reply that names the other label,
//! names none, or gives no explanation is retried with a corrective suffix
//! that states the expected label. Retries carry their attempt number as a
//! cache salt, so each attempt is cached separately and a restarted run
//! replays completed attempts from the cache.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus_io::FormatError;
use crate::llm::{CompletionRequest, GenerationConfig, LlmClient, LlmError};
use crate::prompt::{FewShotExample, Format, LabelVocabulary, PromptTemplate, TemplateError};
use crate::sampler::{read_jsonl, Label, LabeledPair};

pub const DEFAULT_SOURCE_FORMAT: &str = "Is the question: '{query}' answered by the document: '{passage}'?";
pub const DEFAULT_NUDGE: &str = "The correct answer for this pair is \"{label}\". Begin your answer with \"{label}\" and give an explanation consistent with it.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExampleStatus {
    Ok,
    FallbackLabelOnly,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExplainedExample {
    #[serde(flatten)]
    pub pair: LabeledPair,
    pub explanation: String,
    pub llm_model: String,
    pub prompt_digest: String,
    pub status: ExampleStatus,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("output does not start with a label token: {text:?}")]
pub struct ParseFailure {
    pub text: String,
}

/// Case-insensitive prefix match that also requires a word boundary.
fn strip_token<'a>(text: &'a str, token: &str) -> Option<&'a str> {
    let mut chars = text.char_indices();
    for expected in token.chars() {
        let (_, got) = chars.next()?;
        if !got.to_lowercase().eq(expected.to_lowercase()) {
            return None;
        }
    }
    let rest = chars.next().map_or("", |(i, _)| &text[i..]);
    match rest.chars().next() {
        Some(c) if c.is_alphanumeric() => None,
        _ => Some(rest),
    }
}

fn strip_explanation_marker(text: &str) -> &str {
    const MARKER: &str = "explanation";
    match text.get(..MARKER.len()) {
        Some(head) if head.eq_ignore_ascii_case(MARKER) => {
            let rest = text[MARKER.len()..].trim_start();
            rest.strip_prefix(':').unwrap_or(text)
        }
        _ => text,
    }
}

/// Splits an LLM reply into its leading label and the explanation after it.
///
/// `"true. Explanation: the passage states the height."` gives
/// `(Relevant, "the passage states the height.")`.
pub fn parse_llm_output(text: &str, vocabulary: &LabelVocabulary) -> Result<(Label, String), ParseFailure> {
    let trimmed = text.trim();
    let mut tokens = [
        (Label::Relevant, vocabulary.token(Label::Relevant)),
        (Label::NonRelevant, vocabulary.token(Label::NonRelevant)),
    ];
    // Prefer the longer token when one is a prefix of the other.
    tokens.sort_by_key(|(_, token)| std::cmp::Reverse(token.chars().count()));
    for (label, token) in tokens {
        if let Some(rest) = strip_token(trimmed, token) {
            let rest = rest.trim_start_matches(|c: char| c.is_whitespace() || ".,:;!-–—".contains(c));
            let explanation = strip_explanation_marker(rest).trim();
            return Ok((label, explanation.to_string()));
        }
    }
    Err(ParseFailure {
        text: text.to_string(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fallback {
    /// Keep the pair with its label and no explanation.
    LabelOnly,
    /// Mark the pair failed; export drops it.
    Fail,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentPolicy {
    pub max_retries: u32,
    pub fallback: Fallback,
    pub max_in_flight: usize,
    /// Appended to the prompt on retries; `{label}` is the expected label token.
    pub nudge: String,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            max_retries: 2,
            fallback: Fallback::LabelOnly,
            max_in_flight: 8,
            nudge: DEFAULT_NUDGE.to_string(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentStats {
    pub total: usize,
    pub ok: usize,
    pub fallback_label_only: usize,
    pub failed: usize,
    /// Re-asks after a rejected reply, summed over pairs.
    pub retries: u64,
    /// Replies with no leading label, keyed by the expected label.
    pub parse_failures: BTreeMap<Label, u64>,
    /// Replies whose label contradicted the expected one, keyed by expected label.
    pub contradictions: BTreeMap<Label, u64>,
    pub empty_explanations: u64,
    pub request_errors: u64,
    pub cache_hits: u64,
}

impl AugmentStats {
    fn record_status(&mut self, status: ExampleStatus) {
        match status {
            ExampleStatus::Ok => self.ok += 1,
            ExampleStatus::FallbackLabelOnly => self.fallback_label_only += 1,
            ExampleStatus::Failed => self.failed += 1,
        }
    }
}

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Format(#[from] FormatError),
}

/// Builds the request for `pair` on the given attempt (0 = first ask).
pub fn build_request(
    template: &PromptTemplate,
    shots: &[FewShotExample],
    pair: &LabeledPair,
    config: &GenerationConfig,
    nudge: &Format,
    attempt: u32,
) -> CompletionRequest {
    let mut user = template.render_user(shots, pair);
    if attempt > 0 {
        let token = template.label_vocabulary.token(pair.label);
        user.push_str("\n\n");
        user.push_str(nudge.render(|_| token).trim_end());
    }
    CompletionRequest {
        config: config.clone(),
        system: template.render_system(),
        user,
        salt: attempt,
    }
}

/// Generates an explanation for every pair. Output order follows input order.
/// Only cache I/O failures abort; everything else is reflected per item.
pub async fn augment(
    pairs: &[LabeledPair],
    template: &PromptTemplate,
    shots: &[FewShotExample],
    client: &LlmClient,
    config: &GenerationConfig,
    policy: &AugmentPolicy,
) -> Result<(Vec<ExplainedExample>, AugmentStats), AugmentError> {
    let nudge = Format::parse("nudge", &policy.nudge, &["label"])?;
    let vocabulary = &template.label_vocabulary;
    let mut stats = AugmentStats {
        total: pairs.len(),
        ..AugmentStats::default()
    };
    let mut outcome: Vec<Option<(ExampleStatus, String)>> = vec![None; pairs.len()];
    let mut digests = vec![String::new(); pairs.len()];
    let mut pending: Vec<usize> = (0..pairs.len()).collect();

    for attempt in 0..=policy.max_retries {
        if pending.is_empty() {
            break;
        }
        if attempt > 0 {
            stats.retries += pending.len() as u64;
        }
        let requests: Vec<CompletionRequest> = pending
            .iter()
            .map(|&i| build_request(template, shots, &pairs[i], config, &nudge, attempt))
            .collect();
        let results = client.batch_generate(&requests, policy.max_in_flight).await?;

        let mut still_pending = Vec::new();
        for ((&i, request), result) in pending.iter().zip(&requests).zip(results) {
            digests[i] = request.digest();
            let expected = pairs[i].label;
            let text = match result {
                Ok(done) => {
                    stats.cache_hits += u64::from(done.from_cache);
                    done.text
                }
                Err(LlmError::Cache(err)) => return Err(err.into()),
                Err(err) => {
                    tracing::warn!(qid = %pairs[i].qid, docid = %pairs[i].docid, %err, "generation failed");
                    stats.request_errors += 1;
                    still_pending.push(i);
                    continue;
                }
            };
            match parse_llm_output(&text, vocabulary) {
                Ok((label, _)) if label != expected => {
                    *stats.contradictions.entry(expected).or_default() += 1;
                    still_pending.push(i);
                }
                Ok((_, explanation)) if explanation.is_empty() => {
                    stats.empty_explanations += 1;
                    still_pending.push(i);
                }
                Ok((_, explanation)) => outcome[i] = Some((ExampleStatus::Ok, explanation)),
                Err(_) => {
                    *stats.parse_failures.entry(expected).or_default() += 1;
                    still_pending.push(i);
                }
            }
        }
        pending = still_pending;
    }

    let exhausted = match policy.fallback {
        Fallback::LabelOnly => ExampleStatus::FallbackLabelOnly,
        Fallback::Fail => ExampleStatus::Failed,
    };
    let examples = pairs
        .iter()
        .zip(outcome)
        .zip(digests)
        .map(|((pair, outcome), prompt_digest)| {
            let (status, explanation) = outcome.unwrap_or((exhausted, String::new()));
            stats.record_status(status);
            ExplainedExample {
                pair: pair.clone(),
                explanation,
                llm_model: config.model_id.clone(),
                prompt_digest,
                status,
            }
        })
        .collect();
    Ok((examples, stats))
}

pub fn write_examples_jsonl<W: Write>(examples: &[ExplainedExample], mut out: W) -> std::io::Result<()> {
    for example in examples {
        serde_json::to_writer(&mut out, example)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

pub fn read_examples_jsonl<R: BufRead>(reader: R) -> Result<Vec<ExplainedExample>, FormatError> {
    read_jsonl(reader)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FinetuneRecord {
    pub source: String,
    pub target: String,
}

/// Model input format with `{query}` and `{passage}` placeholders.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SourceFormat(Format);

impl SourceFormat {
    pub fn new(format: &str) -> Result<Self, TemplateError> {
        Format::parse("source_format", format, &["query", "passage"]).map(Self)
    }

    pub fn render(&self, pair: &LabeledPair) -> String {
        self.0.render(|name| match name {
            "query" => &pair.query_text,
            _ => &pair.passage_text,
        })
    }
}

impl Default for SourceFormat {
    fn default() -> Self {
        Self::new(DEFAULT_SOURCE_FORMAT).expect("default source format is valid")
    }
}

/// Target text for one example. The label always comes from the pair, never
/// from the generated text.
pub fn finetune_target(example: &ExplainedExample, with_explanations: bool, vocabulary: &LabelVocabulary) -> String {
    let label = vocabulary.token(example.pair.label);
    if with_explanations && example.status == ExampleStatus::Ok && !example.explanation.is_empty() {
        format!("{label}. Explanation: {}", example.explanation)
    } else {
        label.to_string()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExportSummary {
    pub written: usize,
    pub excluded_failed: usize,
    pub positives: usize,
    pub negatives: usize,
}

/// Writes `{"source","target"}` lines. Failed examples are skipped and
/// counted. No truncation happens here.
pub fn export_finetune<W: Write>(
    examples: &[ExplainedExample],
    with_explanations: bool,
    source: &SourceFormat,
    vocabulary: &LabelVocabulary,
    mut out: W,
) -> std::io::Result<ExportSummary> {
    let mut summary = ExportSummary::default();
    for example in examples {
        if example.status == ExampleStatus::Failed {
            summary.excluded_failed += 1;
            continue;
        }
        let record = FinetuneRecord {
            source: source.render(&example.pair),
            target: finetune_target(example, with_explanations, vocabulary),
        };
        serde_json::to_writer(&mut out, &record)?;
        out.write_all(b"\n")?;
        summary.written += 1;
        if example.pair.label.is_relevant() {
            summary.positives += 1;
        } else {
            summary.negatives += 1;
        }
    }
    out.flush()?;
    if summary.excluded_failed > 0 {
        tracing::warn!(excluded = summary.excluded_failed, "failed examples left out of export");
    }
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> LabelVocabulary {
        LabelVocabulary::default()
    }

    #[test]
    fn parses_label_and_explanation() {
        assert_eq!(
            parse_llm_output("true. Explanation: the passage states the height.", &vocab()).unwrap(),
            (Label::Relevant, "the passage states the height.".to_string())
        );
        assert_eq!(
            parse_llm_output("False — the passage discusses K2.", &vocab()).unwrap(),
            (Label::NonRelevant, "the passage discusses K2.".to_string())
        );
        assert!(parse_llm_output("The passage is about K2.", &vocab()).is_err());
    }

    #[test]
    fn parse_edge_cases() {
        assert_eq!(parse_llm_output("  TRUE\n", &vocab()).unwrap(), (Label::Relevant, String::new()));
        assert!(parse_llm_output("trueish answer", &vocab()).is_err());
        assert!(parse_llm_output("", &vocab()).is_err());
        assert_eq!(
            parse_llm_output("false: explanation : nothing here", &vocab()).unwrap().1,
            "nothing here"
        );
        // "Explanations" is not the marker and stays in the text.
        assert_eq!(
            parse_llm_output("true. Explanations vary.", &vocab()).unwrap().1,
            "Explanations vary."
        );
    }

    #[test]
    fn longer_token_wins() {
        let v = LabelVocabulary::new("yes", "yes not").unwrap();
        assert_eq!(parse_llm_output("yes not. x", &v).unwrap().0, Label::NonRelevant);
        assert_eq!(parse_llm_output("yes. x", &v).unwrap().0, Label::Relevant);
    }

    fn example(status: ExampleStatus, label: Label, explanation: &str) -> ExplainedExample {
        ExplainedExample {
            pair: LabeledPair {
                qid: "q".into(),
                docid: "d".into(),
                query_text: "how tall".into(),
                passage_text: "8849 m".into(),
                label,
            },
            explanation: explanation.into(),
            llm_model: "m".into(),
            prompt_digest: "x".into(),
            status,
        }
    }

    #[test]
    fn targets() {
        let ok = example(ExampleStatus::Ok, Label::Relevant, "it gives the height.");
        assert_eq!(finetune_target(&ok, true, &vocab()), "true. Explanation: it gives the height.");
        assert_eq!(finetune_target(&ok, false, &vocab()), "true");
        let fallback = example(ExampleStatus::FallbackLabelOnly, Label::NonRelevant, "");
        assert_eq!(finetune_target(&fallback, true, &vocab()), "false");
    }

    #[test]
    fn target_round_trips_through_parser() {
        let ok = example(ExampleStatus::Ok, Label::NonRelevant, "off topic.");
        let target = finetune_target(&ok, true, &vocab());
        assert_eq!(parse_llm_output(&target, &vocab()).unwrap(), (Label::NonRelevant, "off topic.".into()));
    }

    #[test]
    fn export_skips_failed() {
        let rows = vec![
            example(ExampleStatus::Ok, Label::Relevant, "e"),
            example(ExampleStatus::Failed, Label::Relevant, ""),
            example(ExampleStatus::FallbackLabelOnly, Label::NonRelevant, ""),
        ];
        let mut buf = Vec::new();
        let summary = export_finetune(&rows, true, &SourceFormat::default(), &vocab(), &mut buf).unwrap();
        assert_eq!(
            summary,
            ExportSummary {
                written: 2,
                excluded_failed: 1,
                positives: 1,
                negatives: 1
            }
        );
        let text = String::from_utf8(buf).unwrap();
        let first = text.lines().next().unwrap();
        assert_eq!(
            first,
            r#"{"source":"Is the question: 'how tall' answered by the document: '8849 m'?","target":"true. Explanation: e"}"#
        );
    }

    #[test]
    fn nudge_mentions_expected_label_and_salts() {
        let template = PromptTemplate::default_template();
        let pair = example(ExampleStatus::Ok, Label::NonRelevant, "").pair;
        let nudge = Format::parse("nudge", DEFAULT_NUDGE, &["label"]).unwrap();
        let config = GenerationConfig::greedy("m");
        let first = build_request(&template, &[], &pair, &config, &nudge, 0);
        let retry = build_request(&template, &[], &pair, &config, &nudge, 1);
        let again = build_request(&template, &[], &pair, &config, &nudge, 2);
        assert!(!first.user.contains("correct answer"));
        assert!(retry.user.ends_with("give an explanation consistent with it."));
        assert!(retry.user.contains("\"false\""));
        assert_eq!(retry.user, again.user);
        assert_ne!(retry.digest(), again.digest());
    }

    #[test]
    fn example_jsonl_field_order() {
        let row = example(ExampleStatus::FallbackLabelOnly, Label::Relevant, "");
        let mut buf = Vec::new();
        write_examples_jsonl(std::slice::from_ref(&row), &mut buf).unwrap();
        let line = String::from_utf8(buf.clone()).unwrap();
        assert!(line.starts_with(r#"{"qid":"q","docid":"d","query":"how tall","passage":"8849 m","label":"relevant","explanation":"","llm_model":"m","prompt_digest":"x","status":"fallback_label_only"}"#));
        assert_eq!(read_examples_jsonl(buf.as_slice()).unwrap(), vec![row]);
    }
}
