//! Few-shot prompt templates for explanation generation.
//!
//! A template has an optional system text, a format for each demonstration
//! ("shot"), and a format for the pair being explained. Formats use `{name}`
//! placeholders, with `{{` and `}}` for literal braces. Placeholders are
//! checked when the template is loaded, so rendering cannot fail.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::llm::GenerationConfig;
use crate::sampler::{Label, LabeledPair};

pub const DEFAULT_TEMPLATE_JSON: &str = include_str!("../assets/default_template.json");
pub const DEFAULT_SHOTS_JSON: &str = include_str!("../assets/default_shots.json");

const SHOT_FIELDS: &[&str] = &["query", "passage", "label", "explanation"];
const QUERY_FIELDS: &[&str] = &["query", "passage"];

#[derive(Debug, Error)]
pub enum TemplateError {
    #[error("{field}: unknown placeholder {{{name}}} (allowed: {allowed})")]
    UnknownPlaceholder {
        field: &'static str,
        name: String,
        allowed: String,
    },
    #[error("{field}: unbalanced brace at byte {offset}")]
    UnbalancedBrace { field: &'static str, offset: usize },
    #[error("label vocabulary must hold two distinct non-empty tokens")]
    BadVocabulary,
    #[error("shot {index}: {message}")]
    BadShot { index: usize, message: String },
    #[error("invalid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// The two label tokens, relevant first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "[String; 2]", into = "[String; 2]")]
pub struct LabelVocabulary {
    relevant: String,
    non_relevant: String,
}

impl LabelVocabulary {
    pub fn new(relevant: &str, non_relevant: &str) -> Result<Self, TemplateError> {
        if relevant.is_empty()
            || non_relevant.is_empty()
            || relevant.eq_ignore_ascii_case(non_relevant)
        {
            return Err(TemplateError::BadVocabulary);
        }
        Ok(Self {
            relevant: relevant.to_string(),
            non_relevant: non_relevant.to_string(),
        })
    }

    pub fn token(&self, label: Label) -> &str {
        match label {
            Label::Relevant => &self.relevant,
            Label::NonRelevant => &self.non_relevant,
        }
    }

    pub fn label_of(&self, token: &str) -> Option<Label> {
        if token == self.relevant {
            Some(Label::Relevant)
        } else if token == self.non_relevant {
            Some(Label::NonRelevant)
        } else {
            None
        }
    }
}

impl Default for LabelVocabulary {
    fn default() -> Self {
        Self {
            relevant: "true".into(),
            non_relevant: "false".into(),
        }
    }
}

impl TryFrom<[String; 2]> for LabelVocabulary {
    type Error = TemplateError;

    fn try_from([relevant, non_relevant]: [String; 2]) -> Result<Self, Self::Error> {
        Self::new(&relevant, &non_relevant)
    }
}

impl From<LabelVocabulary> for [String; 2] {
    fn from(v: LabelVocabulary) -> Self {
        [v.relevant, v.non_relevant]
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Segment {
    Literal(String),
    Field(String),
}

/// A placeholder format parsed into literal and field segments.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Format {
    source: String,
    segments: Vec<Segment>,
}

impl Format {
    pub fn parse(field: &'static str, source: &str, allowed: &[&str]) -> Result<Self, TemplateError> {
        let mut segments = Vec::new();
        let mut literal = String::new();
        let mut chars = source.char_indices().peekable();
        while let Some((offset, c)) = chars.next() {
            match c {
                '{' if chars.peek().map(|(_, c)| *c) == Some('{') => {
                    chars.next();
                    literal.push('{');
                }
                '}' if chars.peek().map(|(_, c)| *c) == Some('}') => {
                    chars.next();
                    literal.push('}');
                }
                '{' => {
                    let rest = &source[offset + 1..];
                    let end = rest
                        .find(['}', '{'])
                        .filter(|&i| rest.as_bytes()[i] == b'}')
                        .ok_or(TemplateError::UnbalancedBrace { field, offset })?;
                    let name = &rest[..end];
                    if !allowed.contains(&name) {
                        return Err(TemplateError::UnknownPlaceholder {
                            field,
                            name: name.to_string(),
                            allowed: allowed.join(", "),
                        });
                    }
                    if !literal.is_empty() {
                        segments.push(Segment::Literal(std::mem::take(&mut literal)));
                    }
                    segments.push(Segment::Field(name.to_string()));
                    for _ in 0..=name.chars().count() {
                        chars.next();
                    }
                }
                '}' => return Err(TemplateError::UnbalancedBrace { field, offset }),
                c => literal.push(c),
            }
        }
        if !literal.is_empty() {
            segments.push(Segment::Literal(literal));
        }
        Ok(Self {
            source: source.to_string(),
            segments,
        })
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    /// Substitutes fields using `lookup`; every field was validated at parse time.
    pub fn render<'a>(&self, lookup: impl Fn(&str) -> &'a str) -> String {
        let mut out = String::new();
        for segment in &self.segments {
            match segment {
                Segment::Literal(text) => out.push_str(text),
                Segment::Field(name) => out.push_str(lookup(name)),
            }
        }
        out
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TemplateFile {
    #[serde(default)]
    system_text: Option<String>,
    shot_format: String,
    query_format: String,
    #[serde(default)]
    label_vocabulary: LabelVocabulary,
}

/// A validated prompt template.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub system_text: Option<String>,
    shot_format: Format,
    query_format: Format,
    pub label_vocabulary: LabelVocabulary,
}

impl PromptTemplate {
    pub fn new(
        system_text: Option<String>,
        shot_format: &str,
        query_format: &str,
        label_vocabulary: LabelVocabulary,
    ) -> Result<Self, TemplateError> {
        Ok(Self {
            system_text,
            shot_format: Format::parse("shot_format", shot_format, SHOT_FIELDS)?,
            // `{label}` is deliberately not allowed here: the pair being
            // explained must not reveal its label.
            query_format: Format::parse("query_format", query_format, QUERY_FIELDS)?,
            label_vocabulary,
        })
    }

    pub fn from_json(json: &str) -> Result<Self, TemplateError> {
        let file: TemplateFile = serde_json::from_str(json)?;
        Self::new(
            file.system_text,
            &file.shot_format,
            &file.query_format,
            file.label_vocabulary,
        )
    }

    pub fn load(path: &Path) -> Result<Self, TemplateError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// The template shipped with the crate. Its wording is a reconstruction
    /// of the usual "answer true/false, then explain" relevance prompt.
    pub fn default_template() -> Self {
        Self::from_json(DEFAULT_TEMPLATE_JSON).expect("bundled template is valid")
    }

    pub fn to_json(&self) -> String {
        let file = TemplateFile {
            system_text: self.system_text.clone(),
            shot_format: self.shot_format.source().to_string(),
            query_format: self.query_format.source().to_string(),
            label_vocabulary: self.label_vocabulary.clone(),
        };
        serde_json::to_string_pretty(&file).expect("template serializes")
    }

    /// Renders the user message: every shot in order, then the pair.
    pub fn render_user(&self, shots: &[FewShotExample], pair: &LabeledPair) -> String {
        let mut blocks: Vec<String> = shots
            .iter()
            .map(|shot| {
                self.shot_format.render(|name| match name {
                    "query" => &shot.query,
                    "passage" => &shot.passage,
                    "label" => &shot.label,
                    _ => &shot.explanation,
                })
            })
            .collect();
        blocks.push(self.query_format.render(|name| match name {
            "query" => &pair.query_text,
            _ => &pair.passage_text,
        }));
        blocks.join("\n\n").trim_end().to_string()
    }

    /// The system message, if the template has one.
    pub fn render_system(&self) -> Option<String> {
        self.system_text
            .as_deref()
            .map(str::trim_end)
            .filter(|s| !s.is_empty())
            .map(str::to_string)
    }
}

/// Joins an optional system message and the user message the same way
/// [`render_prompt`] does.
pub fn join_messages(system: Option<&str>, user: &str) -> String {
    match system {
        Some(system) => format!("{system}\n\n{user}").trim_end().to_string(),
        None => user.trim_end().to_string(),
    }
}

/// The full prompt as one string: system text, shots, then the pair, blocks
/// separated by a blank line and with trailing whitespace removed.
pub fn render_prompt(template: &PromptTemplate, shots: &[FewShotExample], pair: &LabeledPair) -> String {
    join_messages(
        template.render_system().as_deref(),
        &template.render_user(shots, pair),
    )
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FewShotExample {
    pub query: String,
    pub passage: String,
    pub label: String,
    pub explanation: String,
}

/// Parses a JSON array of shots and checks them against the vocabulary.
pub fn parse_shots(json: &str, vocabulary: &LabelVocabulary) -> Result<Vec<FewShotExample>, TemplateError> {
    let shots: Vec<FewShotExample> = serde_json::from_str(json)?;
    for (index, shot) in shots.iter().enumerate() {
        if shot.explanation.trim().is_empty() {
            return Err(TemplateError::BadShot {
                index,
                message: "empty explanation".into(),
            });
        }
        if vocabulary.label_of(&shot.label).is_none() {
            return Err(TemplateError::BadShot {
                index,
                message: format!("label {:?} is not in the vocabulary", shot.label),
            });
        }
    }
    Ok(shots)
}

pub fn load_shots(path: &Path, vocabulary: &LabelVocabulary) -> Result<Vec<FewShotExample>, TemplateError> {
    parse_shots(&std::fs::read_to_string(path)?, vocabulary)
}

pub fn default_shots() -> Vec<FewShotExample> {
    parse_shots(DEFAULT_SHOTS_JSON, &LabelVocabulary::default()).expect("bundled shots are valid")
}

fn push_framed(hasher: &mut Sha256, bytes: &[u8]) {
    hasher.update((bytes.len() as u64).to_le_bytes());
    hasher.update(bytes);
}

/// SHA-256 over the length-framed model id, the canonical JSON of the
/// generation config, and the raw prompt bytes. Returned as lowercase hex.
pub fn prompt_digest(prompt: &str, model_id: &str, config: &GenerationConfig) -> String {
    let mut hasher = Sha256::new();
    push_framed(&mut hasher, model_id.as_bytes());
    push_framed(&mut hasher, config.canonical_json().as_bytes());
    hasher.update(prompt.as_bytes());
    hex::encode(hasher.finalize())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(q: &str, p: &str, label: Label) -> LabeledPair {
        LabeledPair {
            qid: "1".into(),
            docid: "2".into(),
            query_text: q.into(),
            passage_text: p.into(),
            label,
        }
    }

    fn shot(q: &str, label: &str) -> FewShotExample {
        FewShotExample {
            query: q.into(),
            passage: format!("passage for {q}"),
            label: label.into(),
            explanation: format!("because {q}"),
        }
    }

    #[test]
    fn zero_shot_is_plain_substitution() {
        let template = PromptTemplate::new(
            None,
            "{query}",
            "Q: {query}\nP: {passage}\nIs it relevant?",
            LabelVocabulary::default(),
        )
        .unwrap();
        let out = render_prompt(&template, &[], &pair("a", "b", Label::Relevant));
        assert_eq!(out, "Q: a\nP: b\nIs it relevant?");
    }

    #[test]
    fn shots_precede_query_in_order() {
        let template = PromptTemplate::new(
            Some("sys".into()),
            "Q: {query}\nA: {label}. Explanation: {explanation}",
            "Q: {query}\nA:",
            LabelVocabulary::default(),
        )
        .unwrap();
        let out = render_prompt(
            &template,
            &[shot("first", "true"), shot("second", "false")],
            &pair("target", "p", Label::Relevant),
        );
        assert_eq!(
            out,
            "sys\n\nQ: first\nA: true. Explanation: because first\n\nQ: second\nA: false. Explanation: because second\n\nQ: target\nA:"
        );
    }

    #[test]
    fn label_never_leaks_into_query_block() {
        let template = PromptTemplate::default_template();
        let shots = default_shots();
        let rel = render_prompt(&template, &shots, &pair("q", "p", Label::Relevant));
        let non = render_prompt(&template, &shots, &pair("q", "p", Label::NonRelevant));
        assert_eq!(rel, non);
    }

    #[test]
    fn typo_placeholder_fails_at_load() {
        let err = PromptTemplate::new(None, "{labell}", "{query}", LabelVocabulary::default()).unwrap_err();
        assert!(matches!(err, TemplateError::UnknownPlaceholder { ref name, .. } if name == "labell"));
        let err = PromptTemplate::new(None, "{label}", "{label}", LabelVocabulary::default()).unwrap_err();
        assert!(matches!(err, TemplateError::UnknownPlaceholder { field: "query_format", .. }));
        assert!(PromptTemplate::new(None, "{query", "{query}", LabelVocabulary::default()).is_err());
        assert!(PromptTemplate::new(None, "query}", "{query}", LabelVocabulary::default()).is_err());
    }

    #[test]
    fn escaped_braces_are_literal() {
        let f = Format::parse("f", "{{x}} {query} }}", QUERY_FIELDS).unwrap();
        assert_eq!(f.render(|_| "Q"), "{x} Q }");
    }

    #[test]
    fn vocabulary_validation() {
        assert!(LabelVocabulary::new("yes", "yes").is_err());
        assert!(LabelVocabulary::new("", "no").is_err());
        let json = r#"{"shot_format":"{label}","query_format":"{query}","label_vocabulary":["a","a"]}"#;
        assert!(PromptTemplate::from_json(json).is_err());
    }

    #[test]
    fn shots_are_validated() {
        let vocab = LabelVocabulary::default();
        let bad_label = r#"[{"query":"q","passage":"p","label":"maybe","explanation":"e"}]"#;
        assert!(matches!(parse_shots(bad_label, &vocab), Err(TemplateError::BadShot { index: 0, .. })));
        let empty = r#"[{"query":"q","passage":"p","label":"true","explanation":" "}]"#;
        assert!(parse_shots(empty, &vocab).is_err());
    }

    #[test]
    fn bundled_defaults_are_balanced() {
        let shots = default_shots();
        assert_eq!(shots.len(), 4);
        assert_eq!(shots.iter().filter(|s| s.label == "true").count(), 2);
        let template = PromptTemplate::default_template();
        assert_eq!(PromptTemplate::from_json(&template.to_json()).unwrap(), template);
    }

    #[test]
    fn digest_of_empty_prompt_is_pinned() {
        // sha256(le64(10) "llama-2-7b" le64(len) canonical-config) with an
        // empty prompt, computed with Python's hashlib.
        let config = GenerationConfig::greedy("llama-2-7b");
        assert_eq!(prompt_digest("", "llama-2-7b", &config), EMPTY_PROMPT_DIGEST);
    }

    const EMPTY_PROMPT_DIGEST: &str = "add5fa61efb38db1059e93fd5b8092516db1c606d73c935b7153b541a75a1e24";

    #[test]
    fn digest_sensitivity() {
        let config = GenerationConfig::greedy("m");
        let a = prompt_digest("prompt", "m", &config);
        assert_eq!(a, prompt_digest("prompt", "m", &config));
        assert_ne!(a, prompt_digest("prompu", "m", &config));
        assert_ne!(a, prompt_digest("prompt", "n", &config));
        let hot = GenerationConfig {
            temperature: 0.7,
            ..config.clone()
        };
        assert_ne!(a, prompt_digest("prompt", "m", &hot));
        assert_eq!(a.len(), 64);
    }
}
