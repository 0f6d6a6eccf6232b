use std::collections::HashSet;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Dialogue, Provenance, RelationAnnotation, RelationLabel, MAX_LABELS};

/// Endpoint of an external relation annotator; unset selects the heuristic.
pub const ANNOTATOR_ENDPOINT_ENV: &str = "MUDI_ANNOTATOR_ENDPOINT";
/// Optional bearer token sent to the external annotator.
pub const ANNOTATOR_TOKEN_ENV: &str = "MUDI_ANNOTATOR_TOKEN";

#[derive(Debug, Error)]
pub enum AnnotatorError {
    #[error("annotator request timed out")]
    Timeout,
    #[error("annotator refused the request: {0}")]
    Refused(String),
    #[error("annotator transport failure: {0}")]
    Transport(String),
    #[error("annotator returned a malformed response: {0}")]
    Malformed(String),
}

/// One adjacent-pair labeling request.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PairRequest {
    pub source_text: String,
    pub target_text: String,
    pub label_vocabulary: Vec<String>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct LabelScore {
    pub label: RelationLabel,
    pub confidence: f64,
}

#[derive(Debug, Deserialize)]
struct PairResponse {
    labels: Vec<RawScore>,
}

#[derive(Debug, Deserialize)]
struct RawScore {
    label: String,
    confidence: f64,
}

pub trait RelationAnnotator: Sync {
    /// Ranked labels with confidences in `[0, 1]`.
    fn label_pair(&self, request: &PairRequest) -> Result<Vec<LabelScore>, AnnotatorError>;

    fn provenance(&self) -> Provenance;
}

/// Deterministic rule table used when no external annotator is configured.
#[derive(Debug, Clone, Default)]
pub struct HeuristicAnnotator;

const ACK_WORDS: &[&str] = &[
    "yes", "yeah", "yep", "ok", "okay", "sure", "thanks", "thank", "right", "cool", "nice",
    "great", "wow", "oh", "haha", "lol", "agreed", "absolutely", "indeed", "awesome", "true",
];

fn words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric() && c != '\'')
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Jaccard overlap of lowercase word sets.
pub(crate) fn lexical_overlap(a: &str, b: &str) -> f64 {
    let sa: HashSet<_> = words(a).into_iter().collect();
    let sb: HashSet<_> = words(b).into_iter().collect();
    let union = sa.union(&sb).count();
    if union == 0 {
        return 0.0;
    }
    sa.intersection(&sb).count() as f64 / union as f64
}

impl HeuristicAnnotator {
    pub fn labels(&self, source: &str, target: &str) -> Vec<LabelScore> {
        let mut out = Vec::new();
        let qap = source.contains('?') && !target.contains('?');
        if qap {
            out.push(LabelScore {
                label: RelationLabel::QuestionAnswerPair,
                confidence: 0.9,
            });
        }
        let ack = words(target)
            .first()
            .is_some_and(|w| ACK_WORDS.contains(&w.as_str()));
        if ack {
            out.push(LabelScore {
                label: RelationLabel::Acknowledgement,
                confidence: 0.8,
            });
        }
        let overlap = lexical_overlap(source, target);
        if overlap >= 0.5 {
            out.push(LabelScore {
                label: RelationLabel::Continuation,
                confidence: 0.7,
            });
        }
        // An answer or acknowledgement continues the exchange even with no
        // shared words, so topic shift only applies to bare statements.
        if overlap < 0.1 && !qap && !ack {
            out.push(LabelScore {
                label: RelationLabel::TopicShift,
                confidence: 0.6,
            });
        }
        if out.is_empty() {
            out.push(LabelScore {
                label: RelationLabel::Comment,
                confidence: 0.5,
            });
        }
        out
    }
}

impl RelationAnnotator for HeuristicAnnotator {
    fn label_pair(&self, request: &PairRequest) -> Result<Vec<LabelScore>, AnnotatorError> {
        Ok(self.labels(&request.source_text, &request.target_text))
    }

    fn provenance(&self) -> Provenance {
        Provenance::Heuristic
    }
}

/// JSON request/response channel to an external annotator.
pub trait Transport: Sync {
    fn post_json(&self, body: &serde_json::Value) -> Result<serde_json::Value, AnnotatorError>;
}

/// Blocking HTTP transport with a minimum interval between requests.
pub struct HttpTransport {
    endpoint: String,
    token: Option<String>,
    agent: ureq::Agent,
    min_interval: Duration,
    last_call: Mutex<Option<Instant>>,
}

impl HttpTransport {
    pub fn new(endpoint: impl Into<String>, token: Option<String>, timeout: Duration, min_interval: Duration) -> Self {
        Self {
            endpoint: endpoint.into(),
            token,
            agent: ureq::AgentBuilder::new().timeout(timeout).build(),
            min_interval,
            last_call: Mutex::new(None),
        }
    }

    fn wait_turn(&self) {
        let mut last = self.last_call.lock().unwrap_or_else(|e| e.into_inner());
        if let Some(prev) = *last {
            let elapsed = prev.elapsed();
            if elapsed < self.min_interval {
                std::thread::sleep(self.min_interval - elapsed);
            }
        }
        *last = Some(Instant::now());
    }
}

impl Transport for HttpTransport {
    fn post_json(&self, body: &serde_json::Value) -> Result<serde_json::Value, AnnotatorError> {
        self.wait_turn();
        let mut req = self.agent.post(&self.endpoint);
        if let Some(t) = &self.token {
            req = req.set("Authorization", &format!("Bearer {t}"));
        }
        match req.send_json(body) {
            Ok(resp) => resp
                .into_json()
                .map_err(|e| AnnotatorError::Malformed(e.to_string())),
            Err(ureq::Error::Status(code, resp)) => Err(AnnotatorError::Refused(format!(
                "HTTP {code}: {}",
                resp.into_string().unwrap_or_default()
            ))),
            Err(ureq::Error::Transport(t)) => {
                if t.kind() == ureq::ErrorKind::Io && t.to_string().contains("timed out") {
                    Err(AnnotatorError::Timeout)
                } else {
                    Err(AnnotatorError::Transport(t.to_string()))
                }
            }
        }
    }
}

/// Adapter for an LLM-backed annotator speaking the pair-request protocol.
pub struct ExternalAnnotator<T: Transport> {
    transport: T,
}

impl<T: Transport> ExternalAnnotator<T> {
    pub fn new(transport: T) -> Self {
        Self { transport }
    }
}

impl<T: Transport> RelationAnnotator for ExternalAnnotator<T> {
    fn label_pair(&self, request: &PairRequest) -> Result<Vec<LabelScore>, AnnotatorError> {
        let body = serde_json::to_value(request).map_err(|e| AnnotatorError::Malformed(e.to_string()))?;
        let value = self.transport.post_json(&body)?;
        let resp: PairResponse =
            serde_json::from_value(value).map_err(|e| AnnotatorError::Malformed(e.to_string()))?;
        let mut out = Vec::with_capacity(resp.labels.len());
        for s in resp.labels {
            let label: RelationLabel = s
                .label
                .parse()
                .map_err(|e: super::UnknownRelation| AnnotatorError::Malformed(e.to_string()))?;
            if !(0.0..=1.0).contains(&s.confidence) {
                return Err(AnnotatorError::Malformed(format!(
                    "confidence {} outside [0, 1]",
                    s.confidence
                )));
            }
            out.push(LabelScore {
                label,
                confidence: s.confidence,
            });
        }
        Ok(out)
    }

    fn provenance(&self) -> Provenance {
        Provenance::External
    }
}

/// External annotator when [`ANNOTATOR_ENDPOINT_ENV`] is set, otherwise the
/// heuristic rule table.
pub fn annotator_from_env() -> Box<dyn RelationAnnotator + Send> {
    match std::env::var(ANNOTATOR_ENDPOINT_ENV) {
        Ok(endpoint) if !endpoint.trim().is_empty() => {
            let token = std::env::var(ANNOTATOR_TOKEN_ENV).ok();
            Box::new(ExternalAnnotator::new(HttpTransport::new(
                endpoint,
                token,
                Duration::from_secs(30),
                Duration::from_millis(200),
            )))
        }
        _ => Box::new(HeuristicAnnotator),
    }
}

fn finalize(scores: Vec<LabelScore>, context: &str) -> Vec<RelationLabel> {
    let mut scores = scores;
    // Stable sort keeps the annotator's order among equal confidences.
    scores.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
    let mut seen = HashSet::new();
    let labels: Vec<_> = scores
        .into_iter()
        .map(|s| s.label)
        .filter(|l| seen.insert(*l))
        .collect();
    if labels.len() > MAX_LABELS {
        log::warn!(
            "{context}: annotator produced {} labels, keeping the {MAX_LABELS} most confident",
            labels.len()
        );
    }
    labels.into_iter().take(MAX_LABELS).collect()
}

/// Returns a copy of `dialogue` with one annotation per adjacent utterance
/// pair. Pairs the annotator fails on fall back to the heuristic table.
pub fn annotate(dialogue: &Dialogue, annotator: &dyn RelationAnnotator) -> Dialogue {
    let vocabulary: Vec<String> = RelationLabel::ALL.iter().map(|l| l.name().to_string()).collect();
    let heuristic = HeuristicAnnotator;
    let annotations = dialogue
        .utterances
        .windows(2)
        .map(|pair| {
            let (src, tgt) = (&pair[0], &pair[1]);
            let context = format!("{} ({}, {})", dialogue.dialogue_id, src.id, tgt.id);
            let request = PairRequest {
                source_text: src.text.clone(),
                target_text: tgt.text.clone(),
                label_vocabulary: vocabulary.clone(),
            };
            let (labels, provenance) = match annotator.label_pair(&request) {
                Ok(scores) => {
                    let labels = finalize(scores, &context);
                    if labels.is_empty() {
                        log::warn!("{context}: annotator returned no labels, using heuristic");
                        (finalize(heuristic.labels(&src.text, &tgt.text), &context), Provenance::Fallback)
                    } else {
                        (labels, annotator.provenance())
                    }
                }
                Err(e) => {
                    log::warn!("{context}: {e}; using heuristic");
                    (finalize(heuristic.labels(&src.text, &tgt.text), &context), Provenance::Fallback)
                }
            };
            RelationAnnotation {
                source_id: src.id,
                target_id: tgt.id,
                labels,
                provenance: Some(provenance),
            }
        })
        .collect();
    Dialogue {
        annotations,
        ..dialogue.clone()
    }
}

/// Annotates a corpus in parallel, preserving order.
pub fn annotate_all(dialogues: &[Dialogue], annotator: &dyn RelationAnnotator) -> Vec<Dialogue> {
    dialogues.par_iter().map(|d| annotate(d, annotator)).collect()
}
