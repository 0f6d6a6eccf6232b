use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use super::{GeneratorError, Variant};
use crate::corpus::{Dialogue, RelationLabel};
use crate::text::{detokenize, tokenize};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const BOS: &str = "[BOS]";
pub const EOS: &str = "[EOS]";
pub const PER: &str = "[PER]";
pub const QRY: &str = "[QRY]";
pub const RSP: &str = "[RSP]";
pub const PROMPT: &str = "[PROMPT]";

const SPECIALS: [&str; 8] = [PAD, UNK, BOS, EOS, PER, QRY, RSP, PROMPT];

pub fn relation_token(label: RelationLabel) -> String {
    format!("[REL:{}]", label.name())
}

/// Words of the natural-language part of every prompt.
pub fn prompt_template(types: &[RelationLabel]) -> String {
    let names: Vec<String> = types.iter().map(|t| t.description()).collect();
    format!("respond with {}", names.join(" and "))
}

/// Token table: specials first, then one token per relation, then corpus
/// words in lexicographic order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocabulary {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

impl Vocabulary {
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut words = BTreeSet::new();
        for t in texts {
            words.extend(tokenize(t));
        }
        for l in RelationLabel::ALL {
            words.extend(tokenize(&prompt_template(&[l])));
        }
        words.extend(tokenize("and"));
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        tokens.extend(RelationLabel::ALL.iter().map(|&l| relation_token(l)));
        tokens.extend(words.into_iter().filter(|w| !SPECIALS.contains(&w.as_str())));
        Self::from(tokens)
    }

    /// Vocabulary over the persona and utterance texts of a corpus.
    pub fn from_corpus(dialogues: &[Dialogue]) -> Self {
        Self::build(
            dialogues
                .iter()
                .flat_map(|d| d.persona.iter().map(String::as_str).chain(d.utterances.iter().map(|u| u.text.as_str()))),
        )
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(self.unk())
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn pad(&self) -> usize {
        0
    }

    pub fn unk(&self) -> usize {
        1
    }

    pub fn bos(&self) -> usize {
        2
    }

    pub fn eos(&self) -> usize {
        3
    }

    pub fn per(&self) -> usize {
        4
    }

    pub fn qry(&self) -> usize {
        5
    }

    pub fn rsp(&self) -> usize {
        6
    }

    pub fn prompt(&self) -> usize {
        7
    }

    pub fn relation(&self, label: RelationLabel) -> usize {
        SPECIALS.len() + label.index()
    }

    pub fn is_relation(&self, id: usize) -> bool {
        (SPECIALS.len()..SPECIALS.len() + RelationLabel::ALL.len()).contains(&id)
    }

    pub fn is_special(&self, id: usize) -> bool {
        id < SPECIALS.len() + RelationLabel::ALL.len()
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text).iter().map(|t| self.id(t)).collect()
    }

    /// Text of the non-special tokens.
    pub fn decode(&self, ids: &[usize]) -> String {
        let words: Vec<&str> = ids
            .iter()
            .filter(|&&i| !self.is_special(i) || i == self.unk())
            .map(|&i| self.token(i))
            .collect();
        detokenize(&words)
    }
}

/// `[BOS] [PER] persona [QRY] q1 [RSP] r1 ... [QRY] qK [EOS]`. `context`
/// must alternate query/response and end with a query. When the result
/// exceeds `max_len`, the oldest query/response pairs are dropped first;
/// only then are the final query and, last of all, the persona shortened.
pub fn build_encoder_input(
    vocab: &Vocabulary,
    persona: &[String],
    context: &[String],
    max_len: usize,
) -> Result<Vec<usize>, GeneratorError> {
    if context.is_empty() {
        return Err(GeneratorError::Argument("empty context".into()));
    }
    if context.len().is_multiple_of(2) {
        return Err(GeneratorError::Argument("context must end with a query".into()));
    }
    let mut persona_ids: Vec<usize> = persona.iter().flat_map(|p| vocab.encode(p)).collect();
    let turns: Vec<Vec<usize>> = context.iter().map(|t| vocab.encode(t)).collect();
    let mut first = 0;
    let mut query = turns[turns.len() - 1].clone();
    let size = |first: usize, persona_ids: &[usize], query: &[usize]| {
        let history: usize = turns[first..turns.len() - 1].iter().map(|t| t.len() + 1).sum();
        4 + persona_ids.len() + history + query.len()
    };
    while first + 1 < turns.len() && size(first, &persona_ids, &query) > max_len {
        first += 2;
    }
    while size(first, &persona_ids, &query) > max_len && !query.is_empty() {
        query.remove(0);
    }
    while size(first, &persona_ids, &query) > max_len && !persona_ids.is_empty() {
        persona_ids.pop();
    }
    if size(first, &persona_ids, &query) > max_len {
        return Err(GeneratorError::Argument(format!("max length {max_len} is below the fixed layout")));
    }
    let mut out = vec![vocab.bos(), vocab.per()];
    out.extend(persona_ids);
    for (k, t) in turns[first..turns.len() - 1].iter().enumerate() {
        out.push(if k % 2 == 0 { vocab.qry() } else { vocab.rsp() });
        out.extend(t);
    }
    out.push(vocab.qry());
    out.extend(query);
    out.push(vocab.eos());
    Ok(out)
}

/// `[PROMPT]`, then one relation token per predicted type for variants
/// with special prompt tokens, then the natural-language template. `types`
/// must already be ordered by descending probability.
pub fn build_prompt(vocab: &Vocabulary, types: &[RelationLabel], variant: Variant) -> Vec<usize> {
    let mut out = vec![vocab.prompt()];
    if variant.uses_prompt_tokens() {
        out.extend(types.iter().map(|&t| vocab.relation(t)));
    }
    out.extend(vocab.encode(&prompt_template(types)));
    out
}

/// Splits a full decoder sequence into inputs and next-token targets.
pub fn teacher_forcing(sequence: &[usize]) -> (Vec<usize>, Vec<usize>) {
    if sequence.len() < 2 {
        return (Vec::new(), Vec::new());
    }
    (sequence[..sequence.len() - 1].to_vec(), sequence[1..].to_vec())
}
