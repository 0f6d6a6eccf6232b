//! Corpus-level evaluation: lexical overlap (BLEU-1, ROUGE-1), diversity
//! (Dist-n, Ent-n, unique sentence ratio) and an NLI-based persona
//! consistency score behind a pluggable adapter.
//!
//! Text is tokenized with [`crate::text::tokenize`]. Entropies use the
//! natural logarithm. Counts are kept in ordered maps and per-pair scores
//! are summed in sorted order, so every metric is bit-for-bit invariant to
//! the order of the corpus.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::text::tokenize;

/// Endpoint of an external NLI service used for the consistency score.
pub const NLI_ENDPOINT_ENV: &str = "MUDI_NLI_ENDPOINT";

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("{hyp} hypotheses but {refs} references")]
    Length { hyp: usize, refs: usize },
    #[error("unknown metric {0:?}")]
    UnknownMetric(String),
    #[error("invalid argument: {0}")]
    Argument(String),
}

fn ngram_counts(responses: &[Vec<String>], n: usize) -> BTreeMap<&[String], usize> {
    let mut counts = BTreeMap::new();
    for r in responses {
        for g in r.windows(n) {
            *counts.entry(g).or_insert(0) += 1;
        }
    }
    counts
}

/// Distinct n-grams over total n-grams across the corpus; `None` when the
/// corpus has no n-gram of that order.
pub fn distinct_n(responses: &[Vec<String>], n: usize) -> Option<f64> {
    if n == 0 {
        return None;
    }
    let counts = ngram_counts(responses, n);
    let total: usize = counts.values().sum();
    (total > 0).then(|| counts.len() as f64 / total as f64)
}

/// Shannon entropy (nats) of the corpus n-gram distribution.
pub fn entropy_n(responses: &[Vec<String>], n: usize) -> Option<f64> {
    if n == 0 {
        return None;
    }
    let counts = ngram_counts(responses, n);
    let total: usize = counts.values().sum();
    if total == 0 {
        return None;
    }
    let t = total as f64;
    let h = counts
        .values()
        .map(|&c| {
            let p = c as f64 / t;
            -p * p.ln()
        })
        .sum::<f64>();
    Some(h.max(0.0))
}

/// Trimmed, whitespace-collapsed, case-folded form used by [`usr`].
pub fn normalize_sentence(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

/// Unique sentence ratio; `None` for an empty corpus.
pub fn usr<S: AsRef<str>>(responses: &[S]) -> Option<f64> {
    if responses.is_empty() {
        return None;
    }
    let unique: BTreeSet<String> = responses.iter().map(|r| normalize_sentence(r.as_ref())).collect();
    Some(unique.len() as f64 / responses.len() as f64)
}

fn unigram_counts(tokens: &[String]) -> BTreeMap<&str, usize> {
    let mut m = BTreeMap::new();
    for t in tokens {
        *m.entry(t.as_str()).or_insert(0) += 1;
    }
    m
}

fn overlap(a: &[String], b: &[String]) -> usize {
    let cb = unigram_counts(b);
    unigram_counts(a)
        .iter()
        .map(|(t, &c)| c.min(cb.get(t).copied().unwrap_or(0)))
        .sum()
}

fn check_aligned(candidates: &[Vec<String>], references: &[Vec<String>]) -> Result<(), MetricsError> {
    if candidates.len() != references.len() {
        return Err(MetricsError::Length {
            hyp: candidates.len(),
            refs: references.len(),
        });
    }
    Ok(())
}

/// Corpus BLEU-1 with brevity penalty, scaled to `[0, 100]`.
pub fn bleu1(candidates: &[Vec<String>], references: &[Vec<String>]) -> Result<f64, MetricsError> {
    check_aligned(candidates, references)?;
    let matched: usize = candidates.iter().zip(references).map(|(c, r)| overlap(c, r)).sum();
    let c: usize = candidates.iter().map(Vec::len).sum();
    let r: usize = references.iter().map(Vec::len).sum();
    if c == 0 {
        return Ok(0.0);
    }
    let precision = matched as f64 / c as f64;
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    Ok(100.0 * bp * precision)
}

/// Unigram F1 of one pair; 0 when either side is empty or nothing overlaps.
pub fn rouge1_pair(candidate: &[String], reference: &[String]) -> f64 {
    let m = overlap(candidate, reference);
    if m == 0 {
        return 0.0;
    }
    let p = m as f64 / candidate.len() as f64;
    let r = m as f64 / reference.len() as f64;
    2.0 * p * r / (p + r)
}

fn sorted_mean(mut xs: Vec<f64>) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.sort_by(f64::total_cmp);
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Mean per-pair ROUGE-1 F-measure, scaled to `[0, 100]`.
pub fn rouge1(candidates: &[Vec<String>], references: &[Vec<String>]) -> Result<f64, MetricsError> {
    check_aligned(candidates, references)?;
    let scores = candidates.iter().zip(references).map(|(c, r)| rouge1_pair(c, r)).collect();
    Ok(100.0 * sorted_mean(scores))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NliLabel {
    Entailment,
    Neutral,
    Contradiction,
}

impl NliLabel {
    pub fn score(self) -> i32 {
        match self {
            NliLabel::Entailment => 1,
            NliLabel::Neutral => 0,
            NliLabel::Contradiction => -1,
        }
    }
}

/// Natural-language-inference model used by [`c_score`].
pub trait NliAdapter: Sync {
    fn name(&self) -> &str;
    /// Relation of `hypothesis` (a response) to `premise` (a persona
    /// sentence).
    fn classify(&self, premise: &str, hypothesis: &str) -> Result<NliLabel, String>;
}

/// Client for an external NLI service. It receives
/// `{"premise": ..., "hypothesis": ...}` and answers `{"label": ...}` with
/// one of `entailment`, `neutral`, `contradiction`.
pub struct HttpNli {
    endpoint: String,
    agent: ureq::Agent,
}

impl HttpNli {
    pub fn new(endpoint: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            agent: ureq::AgentBuilder::new().timeout(Duration::from_secs(30)).build(),
        }
    }

    pub fn from_env() -> Option<Self> {
        std::env::var(NLI_ENDPOINT_ENV)
            .ok()
            .filter(|e| !e.trim().is_empty())
            .map(Self::new)
    }
}

#[derive(Deserialize)]
struct NliResponse {
    label: NliLabel,
}

impl NliAdapter for HttpNli {
    fn name(&self) -> &str {
        "http"
    }

    fn classify(&self, premise: &str, hypothesis: &str) -> Result<NliLabel, String> {
        let resp: NliResponse = self
            .agent
            .post(&self.endpoint)
            .send_json(serde_json::json!({ "premise": premise, "hypothesis": hypothesis }))
            .map_err(|e| e.to_string())?
            .into_json()
            .map_err(|e| e.to_string())?;
        Ok(resp.label)
    }
}

/// Mean over responses of the summed NLI scores against every persona
/// sentence. Any adapter failure aborts the metric.
pub fn c_score<S: AsRef<str>>(responses: &[S], personas: &[Vec<String>], nli: &dyn NliAdapter) -> Result<f64, String> {
    if responses.len() != personas.len() {
        return Err(format!("{} responses but {} personas", responses.len(), personas.len()));
    }
    if responses.is_empty() {
        return Err("no responses".into());
    }
    let mut per = Vec::with_capacity(responses.len());
    for (r, persona) in responses.iter().zip(personas) {
        let mut s = 0i64;
        for p in persona {
            s += i64::from(nli.classify(p, r.as_ref())?.score());
        }
        per.push(s as f64);
    }
    Ok(sorted_mean(per))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Bleu,
    Rouge,
    Dist,
    Ent,
    Usr,
    Cscore,
}

impl Metric {
    pub const DEFAULT: [Metric; 5] = [Metric::Bleu, Metric::Rouge, Metric::Dist, Metric::Ent, Metric::Usr];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Bleu => "bleu",
            Metric::Rouge => "rouge",
            Metric::Dist => "dist",
            Metric::Ent => "ent",
            Metric::Usr => "usr",
            Metric::Cscore => "cscore",
        }
    }

    /// Comma-separated metric names.
    pub fn parse_list(s: &str) -> Result<Vec<Metric>, MetricsError> {
        let set: BTreeSet<Metric> = s
            .split(',')
            .map(str::trim)
            .filter(|x| !x.is_empty())
            .map(str::parse)
            .collect::<Result<_, _>>()?;
        Ok(set.into_iter().collect())
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Metric {
    type Err = MetricsError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "bleu" | "bleu1" => Ok(Metric::Bleu),
            "rouge" | "rouge1" => Ok(Metric::Rouge),
            "dist" => Ok(Metric::Dist),
            "ent" => Ok(Metric::Ent),
            "usr" => Ok(Metric::Usr),
            "cscore" | "c_score" => Ok(Metric::Cscore),
            other => Err(MetricsError::UnknownMetric(other.to_string())),
        }
    }
}

/// Scores of one hypothesis corpus. Metrics that were not requested or
/// could not be computed are `None`; `notes` says why.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub responses: usize,
    pub tokenization: String,
    pub entropy_base: String,
    pub bleu1: Option<f64>,
    pub rouge1: Option<f64>,
    /// Keyed by n.
    pub dist_n: BTreeMap<usize, Option<f64>>,
    pub ent_n: BTreeMap<usize, Option<f64>>,
    pub usr: Option<f64>,
    pub c_score: Option<f64>,
    pub notes: Vec<String>,
}

/// Inputs to [`evaluate`]. `references` and `personas` are aligned with
/// `hypotheses`; `personas` may be empty when the consistency score is not
/// requested.
#[derive(Debug, Clone, Default)]
pub struct EvalInput {
    pub hypotheses: Vec<String>,
    pub references: Vec<String>,
    pub personas: Vec<Vec<String>>,
}

pub const DIVERSITY_ORDERS: [usize; 2] = [1, 2];

pub fn evaluate(input: &EvalInput, metrics: &[Metric], nli: Option<&dyn NliAdapter>) -> Result<EvalReport, MetricsError> {
    let hyp: Vec<Vec<String>> = input.hypotheses.iter().map(|h| tokenize(h)).collect();
    let wants = |m: Metric| metrics.contains(&m);
    let mut notes = Vec::new();
    let refs: Vec<Vec<String>> = input.references.iter().map(|r| tokenize(r)).collect();
    if (wants(Metric::Bleu) || wants(Metric::Rouge)) && refs.len() != hyp.len() {
        return Err(MetricsError::Length {
            hyp: hyp.len(),
            refs: refs.len(),
        });
    }
    let bleu = wants(Metric::Bleu).then(|| bleu1(&hyp, &refs)).transpose()?;
    let rouge = wants(Metric::Rouge).then(|| rouge1(&hyp, &refs)).transpose()?;
    let per_order = |f: fn(&[Vec<String>], usize) -> Option<f64>, on: bool| -> BTreeMap<usize, Option<f64>> {
        if on {
            DIVERSITY_ORDERS.iter().map(|&n| (n, f(&hyp, n))).collect()
        } else {
            BTreeMap::new()
        }
    };
    let dist_n = per_order(distinct_n, wants(Metric::Dist));
    let ent_n = per_order(entropy_n, wants(Metric::Ent));
    for (name, map) in [("dist", &dist_n), ("ent", &ent_n)] {
        for (n, v) in map {
            if v.is_none() {
                notes.push(format!("{name}-{n}: corpus has no {n}-grams"));
            }
        }
    }
    let usr_v = if wants(Metric::Usr) { usr(&input.hypotheses) } else { None };
    let c = if wants(Metric::Cscore) {
        match nli {
            None => {
                notes.push("cscore: no NLI adapter configured; skipped".into());
                None
            }
            Some(adapter) => match c_score(&input.hypotheses, &input.personas, adapter) {
                Ok(v) => Some(v),
                Err(e) => {
                    notes.push(format!("cscore: adapter {} failed: {e}", adapter.name()));
                    None
                }
            },
        }
    } else {
        None
    };
    Ok(EvalReport {
        responses: hyp.len(),
        tokenization: "lowercase; whitespace split; each punctuation character is a token".into(),
        entropy_base: "e".into(),
        bleu1: bleu,
        rouge1: rouge,
        dist_n,
        ent_n,
        usr: usr_v,
        c_score: c,
        notes,
    })
}
