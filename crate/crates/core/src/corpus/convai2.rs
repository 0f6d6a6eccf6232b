//! Reader for the ParlAI text release of ConvAI2 (`train_self_original.txt`
//! and friends): numbered lines, `your persona:` lines first, then
//! `query<TAB>response<TAB><TAB>candidates` lines. Numbering restarts at 1
//! for every dialogue.

use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use super::{CorpusError, Dialogue, Speaker, Utterance};

/// Path to the ConvAI2 training file, consulted by tests that check corpus
/// statistics against the released data.
pub const CONVAI2_TRAIN_ENV: &str = "MUDI_CONVAI2_TRAIN";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Convai2Stats {
    pub dialogues: usize,
    /// Query/response lines; each contributes two utterances.
    pub exchanges: usize,
}

pub fn load_convai2(path: &Path, limit: Option<usize>) -> Result<(Vec<Dialogue>, Convai2Stats), CorpusError> {
    let io = |source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    };
    let reader = BufReader::new(File::open(path).map_err(io)?);
    let mut dialogues = Vec::new();
    let mut exchanges = 0;
    let mut current: Option<Dialogue> = None;

    let finish = |d: Dialogue, out: &mut Vec<Dialogue>| -> Result<(), CorpusError> {
        d.validate()?;
        out.push(d);
        Ok(())
    };

    for (line_no, line) in reader.lines().enumerate() {
        let line = line.map_err(io)?;
        let line = line.trim_end_matches(['\r', '\n']);
        if line.trim().is_empty() {
            continue;
        }
        let (num, rest) = line.split_once(' ').ok_or_else(|| CorpusError::Validation {
            dialogue_id: format!("line {}", line_no + 1),
            rule: "expected a leading line number".into(),
        })?;
        let num: usize = num.parse().map_err(|_| CorpusError::Validation {
            dialogue_id: format!("line {}", line_no + 1),
            rule: format!("bad line number {num:?}"),
        })?;
        if num == 1 {
            if let Some(d) = current.take() {
                finish(d, &mut dialogues)?;
                if limit.is_some_and(|n| dialogues.len() >= n) {
                    break;
                }
            }
            current = Some(Dialogue {
                dialogue_id: format!("convai2-{}", dialogues.len()),
                persona: Vec::new(),
                utterances: Vec::new(),
                annotations: Vec::new(),
            });
        }
        let d = current.get_or_insert_with(|| Dialogue {
            dialogue_id: format!("convai2-{}", dialogues.len()),
            persona: Vec::new(),
            utterances: Vec::new(),
            annotations: Vec::new(),
        });
        if let Some(p) = rest.strip_prefix("your persona:") {
            d.persona.push(p.trim().to_string());
            continue;
        }
        if rest.starts_with("partner's persona:") {
            continue;
        }
        let mut fields = rest.split('\t');
        let query = fields.next().unwrap_or("").trim();
        let response = fields.next().unwrap_or("").trim();
        for (speaker, text) in [(Speaker::User, query), (Speaker::Bot, response)] {
            let id = d.utterances.len();
            d.utterances.push(Utterance {
                id,
                speaker,
                turn_index: id / 2,
                text: text.to_string(),
            });
        }
        exchanges += 1;
    }
    if let Some(d) = current.take() {
        if !limit.is_some_and(|n| dialogues.len() >= n) {
            finish(d, &mut dialogues)?;
        }
    }
    let stats = Convai2Stats {
        dialogues: dialogues.len(),
        exchanges: dialogues.iter().map(|d| d.utterances.len() / 2).sum(),
    };
    debug_assert!(limit.is_some() || stats.exchanges == exchanges);
    Ok((dialogues, stats))
}
