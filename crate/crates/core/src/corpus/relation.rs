use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// Discourse relation between two utterances: the sixteen STAC relations
/// plus a topic-shift label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum RelationLabel {
    Comment,
    ClarificationQuestion,
    Elaboration,
    Acknowledgement,
    Continuation,
    Explanation,
    Conditional,
    QuestionAnswerPair,
    Alternation,
    QElab,
    Result,
    Background,
    Narration,
    Correction,
    Parallel,
    Contrast,
    TopicShift,
}

pub const NUM_RELATIONS: usize = 17;

impl RelationLabel {
    pub const ALL: [RelationLabel; NUM_RELATIONS] = [
        Self::Comment,
        Self::ClarificationQuestion,
        Self::Elaboration,
        Self::Acknowledgement,
        Self::Continuation,
        Self::Explanation,
        Self::Conditional,
        Self::QuestionAnswerPair,
        Self::Alternation,
        Self::QElab,
        Self::Result,
        Self::Background,
        Self::Narration,
        Self::Correction,
        Self::Parallel,
        Self::Contrast,
        Self::TopicShift,
    ];

    /// Stable class index in `0..17`.
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    /// Canonical name, STAC spelling.
    pub fn name(self) -> &'static str {
        match self {
            Self::Comment => "Comment",
            Self::ClarificationQuestion => "Clarification_question",
            Self::Elaboration => "Elaboration",
            Self::Acknowledgement => "Acknowledgement",
            Self::Continuation => "Continuation",
            Self::Explanation => "Explanation",
            Self::Conditional => "Conditional",
            Self::QuestionAnswerPair => "Question_answer_pair",
            Self::Alternation => "Alternation",
            Self::QElab => "Q_Elab",
            Self::Result => "Result",
            Self::Background => "Background",
            Self::Narration => "Narration",
            Self::Correction => "Correction",
            Self::Parallel => "Parallel",
            Self::Contrast => "Contrast",
            Self::TopicShift => "Topic_shift",
        }
    }

    /// Lowercase words used in natural-language prompts.
    pub fn description(self) -> String {
        self.name().replace('_', " ").to_lowercase()
    }
}

impl fmt::Display for RelationLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown relation label {0:?}")]
pub struct UnknownRelation(pub String);

impl FromStr for RelationLabel {
    type Err = UnknownRelation;

    /// Case-insensitive; `-`, `_` and spaces are interchangeable.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key = |x: &str| {
            x.chars()
                .filter(|c| !matches!(c, '_' | '-' | ' '))
                .flat_map(char::to_lowercase)
                .collect::<String>()
        };
        let wanted = key(s);
        Self::ALL
            .iter()
            .copied()
            .find(|l| key(l.name()) == wanted)
            .ok_or_else(|| UnknownRelation(s.to_string()))
    }
}

impl Serialize for RelationLabel {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for RelationLabel {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// 17-dim multi-hot encoding.
pub fn multi_hot(labels: &[RelationLabel]) -> [f64; NUM_RELATIONS] {
    let mut v = [0.0; NUM_RELATIONS];
    for l in labels {
        v[l.index()] = 1.0;
    }
    v
}
