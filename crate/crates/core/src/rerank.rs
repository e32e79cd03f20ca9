//! Reranking through a remote relevance scorer.
//!
//! The scorer speaks a small JSON protocol:
//!
//! ```text
//! POST {base_url}/score   {"query": "...", "passages": ["...", ...]}
//!                      -> {"p_relevant": [0.93, ...]}
//! GET  {base_url}/healthz -> 200
//! ```
//!
//! `p_relevant[i]` is the probability of the relevant label token for
//! `passages[i]`. Runs are ordered by score descending with ties broken by
//! docid descending, the same order trec_eval evaluates in.

use std::cmp::Ordering;
use std::collections::{HashMap, HashSet};
use std::sync::atomic::AtomicU64;
use std::sync::Arc;
use std::time::Duration;

use futures::stream::{self, StreamExt};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus_io::{CandidateSet, Passage, Query, TrecRunEntry};
use crate::llm::{with_retries, LlmError, RetryPolicy};

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredDoc {
    pub docid: String,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreFailurePolicy {
    /// Fail the query when any batch cannot be scored.
    Abort,
    /// Give unscorable passages score 0 and log a warning.
    Sentinel,
}

#[derive(Debug, Clone)]
pub struct ScorerEndpoint {
    pub base_url: String,
    pub timeout: Duration,
    pub max_in_flight: usize,
    /// Passages per `/score` request.
    pub batch_size: usize,
    pub retry: RetryPolicy,
    pub on_failure: ScoreFailurePolicy,
    /// Send `"{title}. {text}"` for passages that carry a title.
    pub with_title: bool,
}

impl ScorerEndpoint {
    pub fn new(base_url: &str) -> Self {
        Self {
            base_url: base_url.trim_end_matches('/').to_string(),
            timeout: Duration::from_secs(60),
            max_in_flight: 4,
            batch_size: 32,
            retry: RetryPolicy::default(),
            on_failure: ScoreFailurePolicy::Abort,
            with_title: true,
        }
    }
}

#[derive(Debug, Error)]
pub enum RerankError {
    #[error("scorer request failed: {0}")]
    Scorer(#[from] LlmError),
    #[error("scorer returned {value} for {docid}; scores must lie in [0, 1]")]
    OutOfRange { docid: String, value: f64 },
    #[error("scorer returned {got} scores for {expected} passages")]
    LengthMismatch { expected: usize, got: usize },
    #[error("no score for candidate {0}")]
    MissingScore(String),
    #[error("no passage text for candidate {0}")]
    MissingPassage(String),
    #[error("no query text for {0}")]
    MissingQuery(String),
    #[error("invalid scorer configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Serialize)]
struct ScoreRequest<'a> {
    query: &'a str,
    passages: &'a [String],
}

#[derive(Deserialize)]
struct ScoreResponse {
    p_relevant: Vec<f64>,
}

/// One `/score` call's worth of work.
struct Job<'a> {
    query: &'a str,
    docids: Vec<&'a str>,
    texts: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct ScorerClient {
    http: reqwest::Client,
    endpoint: Arc<ScorerEndpoint>,
    retries: Arc<AtomicU64>,
}

impl ScorerClient {
    pub fn new(endpoint: ScorerEndpoint) -> Result<Self, RerankError> {
        if endpoint.max_in_flight == 0 || endpoint.batch_size == 0 {
            return Err(RerankError::InvalidConfig(
                "max_in_flight and batch_size must be >= 1".into(),
            ));
        }
        let http = reqwest::Client::builder()
            .timeout(endpoint.timeout)
            .build()
            .map_err(|e| RerankError::InvalidConfig(e.to_string()))?;
        Ok(Self {
            http,
            endpoint: Arc::new(endpoint),
            retries: Arc::new(AtomicU64::new(0)),
        })
    }

    pub fn retries(&self) -> u64 {
        self.retries.load(std::sync::atomic::Ordering::Relaxed)
    }

    pub async fn healthz(&self) -> Result<(), RerankError> {
        let url = format!("{}/healthz", self.endpoint.base_url);
        let response = self.http.get(url).send().await.map_err(LlmError::from_reqwest)?;
        if response.status().is_success() {
            Ok(())
        } else {
            Err(LlmError::Http {
                status: response.status().as_u16(),
                body: response.text().await.unwrap_or_default(),
            }
            .into())
        }
    }

    async fn post_scores(&self, query: &str, passages: &[String]) -> Result<Vec<f64>, LlmError> {
        let url = format!("{}/score", self.endpoint.base_url);
        let response = self
            .http
            .post(url)
            .json(&ScoreRequest { query, passages })
            .send()
            .await
            .map_err(LlmError::from_reqwest)?;
        let status = response.status();
        let raw = response.text().await.map_err(LlmError::from_reqwest)?;
        if !status.is_success() {
            return Err(LlmError::Http {
                status: status.as_u16(),
                body: raw,
            });
        }
        serde_json::from_str::<ScoreResponse>(&raw)
            .map(|r| r.p_relevant)
            .map_err(|e| LlmError::MalformedResponse {
                reason: e.to_string(),
                raw,
            })
    }

    async fn run_job(&self, job: &Job<'_>) -> Result<Vec<ScoredDoc>, RerankError> {
        if job.texts.is_empty() {
            return Ok(Vec::new());
        }
        let outcome = with_retries(&self.endpoint.retry, &self.retries, || {
            self.post_scores(job.query, &job.texts)
        })
        .await;
        let scores = match outcome {
            Ok(scores) => scores,
            Err(err) if self.endpoint.on_failure == ScoreFailurePolicy::Sentinel => {
                tracing::warn!(%err, passages = job.texts.len(), "scoring failed; using sentinel score 0");
                vec![0.0; job.texts.len()]
            }
            Err(err) => return Err(err.into()),
        };
        if scores.len() != job.texts.len() {
            return Err(RerankError::LengthMismatch {
                expected: job.texts.len(),
                got: scores.len(),
            });
        }
        job.docids
            .iter()
            .zip(scores)
            .map(|(docid, score)| {
                if score.is_finite() && (0.0..=1.0).contains(&score) {
                    Ok(ScoredDoc {
                        docid: docid.to_string(),
                        score,
                    })
                } else {
                    Err(RerankError::OutOfRange {
                        docid: docid.to_string(),
                        value: score,
                    })
                }
            })
            .collect()
    }

    fn jobs<'a>(&self, query: &'a Query, passages: &'a [Passage]) -> Vec<Job<'a>> {
        passages
            .chunks(self.endpoint.batch_size)
            .map(|chunk| Job {
                query: &query.text,
                docids: chunk.iter().map(|p| p.docid.as_str()).collect(),
                texts: chunk
                    .iter()
                    .map(|p| p.display_text(self.endpoint.with_title))
                    .collect(),
            })
            .collect()
    }

    /// Scores every passage against `query`. Output follows input order.
    pub async fn score_batch(&self, query: &Query, passages: &[Passage]) -> Result<Vec<ScoredDoc>, RerankError> {
        let jobs = self.jobs(query, passages);
        let batches: Vec<_> = stream::iter(&jobs)
            .map(|job| self.run_job(job))
            .buffered(self.endpoint.max_in_flight)
            .collect()
            .await;
        let mut out = Vec::with_capacity(passages.len());
        for batch in batches {
            out.extend(batch?);
        }
        Ok(out)
    }

    /// Scores and reranks every candidate set. Requests from all queries share
    /// one in-flight cap; output order follows `sets`.
    pub async fn rerank_all(
        &self,
        queries: &HashMap<String, Query>,
        sets: &[CandidateSet],
        passages: &HashMap<String, Passage>,
        tag: &str,
        round_scores: bool,
    ) -> Result<Vec<TrecRunEntry>, RerankError> {
        let mut per_set: Vec<(&Query, Vec<Passage>)> = Vec::with_capacity(sets.len());
        for set in sets {
            let query = queries
                .get(&set.qid)
                .ok_or_else(|| RerankError::MissingQuery(set.qid.clone()))?;
            let docs = set
                .candidates
                .iter()
                .map(|(docid, _)| {
                    passages
                        .get(docid)
                        .cloned()
                        .ok_or_else(|| RerankError::MissingPassage(docid.clone()))
                })
                .collect::<Result<Vec<_>, _>>()?;
            per_set.push((query, docs));
        }
        let jobs: Vec<(usize, Job<'_>)> = per_set
            .iter()
            .enumerate()
            .flat_map(|(i, (query, docs))| self.jobs(query, docs).into_iter().map(move |job| (i, job)))
            .collect();
        let results: Vec<(usize, Result<Vec<ScoredDoc>, RerankError>)> = stream::iter(&jobs)
            .map(|(i, job)| async move { (*i, self.run_job(job).await) })
            .buffered(self.endpoint.max_in_flight)
            .collect()
            .await;

        let mut scores: Vec<HashMap<String, f64>> = vec![HashMap::new(); sets.len()];
        for (i, result) in results {
            for doc in result? {
                let score = if round_scores { round_to_run_precision(doc.score) } else { doc.score };
                scores[i].insert(doc.docid, score);
            }
        }
        let mut run = Vec::new();
        for (set, scores) in sets.iter().zip(&scores) {
            run.extend(rerank(set, scores, tag)?);
        }
        Ok(run)
    }
}

/// Rounds to the six fractional digits a run file stores, so that the rank
/// column and the score column of a written run agree after parsing.
pub fn round_to_run_precision(score: f64) -> f64 {
    (score * 1e6).round() / 1e6
}

/// Score descending, then docid descending.
pub fn ranking_order(a: (&str, f64), b: (&str, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then_with(|| b.0.cmp(a.0))
}

/// Orders a candidate set by `scores` and assigns ranks 1..n.
pub fn rerank(
    candidates: &CandidateSet,
    scores: &HashMap<String, f64>,
    tag: &str,
) -> Result<Vec<TrecRunEntry>, RerankError> {
    let mut seen = HashSet::new();
    let mut scored = Vec::with_capacity(candidates.candidates.len());
    for (docid, _) in &candidates.candidates {
        if !seen.insert(docid.as_str()) {
            continue;
        }
        let score = *scores
            .get(docid)
            .ok_or_else(|| RerankError::MissingScore(docid.clone()))?;
        scored.push((docid.as_str(), score));
    }
    scored.sort_by(|a, b| ranking_order(*a, *b));
    Ok(scored
        .into_iter()
        .enumerate()
        .map(|(i, (docid, score))| TrecRunEntry {
            qid: candidates.qid.clone(),
            docid: docid.to_string(),
            rank: i as u32 + 1,
            score,
            tag: tag.to_string(),
        })
        .collect())
}
