//! Dialogue ingestion, the discourse-relation taxonomy and coherence
//! annotation.

mod annotate;
pub mod convai2;
mod relation;

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use annotate::{
    annotate, annotate_all, annotator_from_env, AnnotatorError, ExternalAnnotator, HeuristicAnnotator,
    HttpTransport, LabelScore, PairRequest, RelationAnnotator, Transport, ANNOTATOR_ENDPOINT_ENV,
    ANNOTATOR_TOKEN_ENV,
};
pub use relation::{multi_hot, RelationLabel, UnknownRelation, NUM_RELATIONS};

pub const MAX_LABELS: usize = 3;
pub const MAX_PERSONA: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Speaker {
    User,
    Bot,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: usize,
    pub speaker: Speaker,
    pub turn_index: usize,
    pub text: String,
}

/// Where an annotation's labels came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Heuristic,
    External,
    /// External annotator failed for this pair; heuristic labels were used.
    Fallback,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelationAnnotation {
    pub source_id: usize,
    pub target_id: usize,
    /// Distinct labels, highest confidence first.
    pub labels: Vec<RelationLabel>,
    pub provenance: Option<Provenance>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dialogue {
    pub dialogue_id: String,
    pub persona: Vec<String>,
    pub utterances: Vec<Utterance>,
    pub annotations: Vec<RelationAnnotation>,
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read corpus {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("line {line}: malformed JSON: {source}")]
    Parse {
        line: usize,
        source: serde_json::Error,
    },
    #[error("dialogue {dialogue_id}: {rule}")]
    Validation { dialogue_id: String, rule: String },
}

impl Dialogue {
    /// Builds a dialogue from alternating texts starting with the user.
    pub fn from_texts(
        dialogue_id: impl Into<String>,
        persona: Vec<String>,
        texts: &[&str],
    ) -> Result<Self, CorpusError> {
        let raw = RawDialogue {
            dialogue_id: dialogue_id.into(),
            persona,
            utterances: texts
                .iter()
                .enumerate()
                .map(|(i, t)| RawUtterance {
                    speaker: if i % 2 == 0 { Speaker::User } else { Speaker::Bot },
                    text: t.to_string(),
                })
                .collect(),
            annotations: None,
        };
        raw.into_dialogue()
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn is_annotated(&self) -> bool {
        self.utterances.len() < 2 || !self.annotations.is_empty()
    }

    /// Labels on the edge `(source, target)`, if annotated.
    pub fn labels_between(&self, source: usize, target: usize) -> Option<&[RelationLabel]> {
        self.annotations
            .iter()
            .find(|a| a.source_id == source && a.target_id == target)
            .map(|a| a.labels.as_slice())
    }

    /// The first `len` utterances with their annotations.
    pub fn prefix(&self, len: usize) -> Dialogue {
        let len = len.min(self.utterances.len());
        Dialogue {
            dialogue_id: self.dialogue_id.clone(),
            persona: self.persona.clone(),
            utterances: self.utterances[..len].to_vec(),
            annotations: self
                .annotations
                .iter()
                .filter(|a| a.target_id < len)
                .cloned()
                .collect(),
        }
    }

    /// Checks every structural invariant.
    pub fn validate(&self) -> Result<(), CorpusError> {
        let fail = |rule: String| {
            Err(CorpusError::Validation {
                dialogue_id: self.dialogue_id.clone(),
                rule,
            })
        };
        if self.persona.is_empty() || self.persona.len() > MAX_PERSONA {
            return fail(format!(
                "persona must have 1..={MAX_PERSONA} sentences, found {}",
                self.persona.len()
            ));
        }
        if let Some(i) = self.persona.iter().position(|p| p.trim().is_empty()) {
            return fail(format!("persona sentence {i} is empty"));
        }
        if self.utterances.len() < 2 {
            return fail(format!(
                "at least 2 utterances required, found {}",
                self.utterances.len()
            ));
        }
        for (i, u) in self.utterances.iter().enumerate() {
            if u.id != i {
                return fail(format!("utterance ids must be consecutive from 0, found {} at {i}", u.id));
            }
            let expected = if i % 2 == 0 { Speaker::User } else { Speaker::Bot };
            if u.speaker != expected {
                return fail(format!(
                    "speakers must alternate starting with USER; utterance {i} is {:?}",
                    u.speaker
                ));
            }
            if u.turn_index != i / 2 {
                return fail(format!("utterance {i} has turn_index {} != {}", u.turn_index, i / 2));
            }
            if u.text.trim().is_empty() {
                return fail(format!("utterance {i} has empty text"));
            }
        }
        let mut seen = HashSet::new();
        for a in &self.annotations {
            if a.source_id >= self.utterances.len() || a.target_id >= self.utterances.len() {
                return fail(format!(
                    "annotation ({}, {}) references a missing utterance",
                    a.source_id, a.target_id
                ));
            }
            if a.source_id >= a.target_id {
                return fail(format!(
                    "annotation ({}, {}) must have source < target",
                    a.source_id, a.target_id
                ));
            }
            if a.labels.is_empty() || a.labels.len() > MAX_LABELS {
                return fail(format!(
                    "annotation ({}, {}) must carry 1..={MAX_LABELS} labels, found {}",
                    a.source_id,
                    a.target_id,
                    a.labels.len()
                ));
            }
            let distinct: HashSet<_> = a.labels.iter().collect();
            if distinct.len() != a.labels.len() {
                return fail(format!("annotation ({}, {}) repeats a label", a.source_id, a.target_id));
            }
            if !seen.insert((a.source_id, a.target_id)) {
                return fail(format!("annotation ({}, {}) appears twice", a.source_id, a.target_id));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawUtterance {
    speaker: Speaker,
    text: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawAnnotation {
    source: usize,
    target: usize,
    labels: Vec<RelationLabel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    provenance: Option<Provenance>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDialogue {
    dialogue_id: String,
    persona: Vec<String>,
    utterances: Vec<RawUtterance>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    annotations: Option<Vec<RawAnnotation>>,
}

impl RawDialogue {
    fn into_dialogue(self) -> Result<Dialogue, CorpusError> {
        let d = Dialogue {
            dialogue_id: self.dialogue_id,
            persona: self.persona,
            utterances: self
                .utterances
                .into_iter()
                .enumerate()
                .map(|(id, u)| Utterance {
                    id,
                    speaker: u.speaker,
                    turn_index: id / 2,
                    text: u.text,
                })
                .collect(),
            annotations: self
                .annotations
                .unwrap_or_default()
                .into_iter()
                .map(|a| RelationAnnotation {
                    source_id: a.source,
                    target_id: a.target,
                    labels: a.labels,
                    provenance: a.provenance,
                })
                .collect(),
        };
        d.validate()?;
        Ok(d)
    }

    fn from_dialogue(d: &Dialogue) -> Self {
        RawDialogue {
            dialogue_id: d.dialogue_id.clone(),
            persona: d.persona.clone(),
            utterances: d
                .utterances
                .iter()
                .map(|u| RawUtterance {
                    speaker: u.speaker,
                    text: u.text.clone(),
                })
                .collect(),
            annotations: (!d.annotations.is_empty()).then(|| {
                d.annotations
                    .iter()
                    .map(|a| RawAnnotation {
                        source: a.source_id,
                        target: a.target_id,
                        labels: a.labels.clone(),
                        provenance: a.provenance,
                    })
                    .collect()
            }),
        }
    }
}

/// Parses one JSONL line into a validated dialogue.
pub fn parse_dialogue(line: &str, line_no: usize) -> Result<Dialogue, CorpusError> {
    let raw: RawDialogue =
        serde_json::from_str(line).map_err(|source| CorpusError::Parse { line: line_no, source })?;
    raw.into_dialogue()
}

pub fn to_json_line(d: &Dialogue) -> String {
    serde_json::to_string(&RawDialogue::from_dialogue(d)).expect("dialogue serializes")
}

/// Reads a JSONL corpus, keeping file order. Blank lines are skipped.
pub fn load_corpus(path: &Path, limit: Option<usize>) -> Result<Vec<Dialogue>, CorpusError> {
    let io = |source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    };
    let reader = BufReader::new(File::open(path).map_err(io)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        if limit.is_some_and(|n| out.len() >= n) {
            break;
        }
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_dialogue(&line, i + 1)?);
    }
    Ok(out)
}

pub fn save_corpus(path: &Path, dialogues: &[Dialogue]) -> Result<(), CorpusError> {
    let io = |source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    };
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(io)?;
    }
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    for d in dialogues {
        writeln!(w, "{}", to_json_line(d)).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// The bundled 20-dialogue fixture corpus with heuristic annotations.
pub fn fixture_corpus() -> Vec<Dialogue> {
    include_str!("../../fixtures/fixture.jsonl")
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_dialogue(l, i + 1).expect("bundled fixture is valid"))
        .collect()
}
