use std::fs;
use std::io::Write;
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::model::GeneratorModel;
use super::train::{target_layout, Conditioner, GENERATOR_STAGE};
use super::vocab::{build_encoder_input, build_prompt, Vocabulary};
use super::{DecodeMode, GeneratorConfig, GeneratorError};
use crate::coherence::FusionMode;
use crate::corpus::{Dialogue, RelationLabel, Speaker, Utterance};
use crate::nn::checkpoint::{self, Manifest};
use crate::nn::{ParamStore, Tape};

/// One generated response with its trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationOutput {
    pub dialogue_id: String,
    pub response: String,
    pub predicted_types: Vec<String>,
    /// Fraction of aggregation decisions that chose the persona branch;
    /// `null` without graph memory.
    pub gate_mean: Option<f64>,
    /// The response hit the length limit before `[EOS]`.
    pub truncated: bool,
}

/// A trained generator with its conditioning model.
pub struct Generator {
    pub model: GeneratorModel,
    pub store: ParamStore,
    pub vocab: Vocabulary,
    pub conditioner: Conditioner,
}

/// Rebuilds a generator from a checkpoint directory.
pub fn load_generator(dir: &Path, conditioner: Conditioner) -> Result<(Manifest, Generator), GeneratorError> {
    let (manifest, loaded) = checkpoint::load(dir)?;
    if manifest.stage != GENERATOR_STAGE {
        return Err(GeneratorError::Meta(format!("checkpoint stage is {:?}, expected {GENERATOR_STAGE:?}", manifest.stage)));
    }
    let meta = |key: &str| manifest.meta.get(key).cloned().ok_or_else(|| GeneratorError::Meta(format!("missing {key}")));
    let config: GeneratorConfig = serde_json::from_value(meta("generator")?).map_err(|e| GeneratorError::Meta(e.to_string()))?;
    let vocab: Vocabulary = serde_json::from_value(meta("vocab")?).map_err(|e| GeneratorError::Meta(e.to_string()))?;
    let memory_dim: usize = serde_json::from_value(meta("memory_dim")?).map_err(|e| GeneratorError::Meta(e.to_string()))?;
    if memory_dim != conditioner.memory_dim() {
        return Err(GeneratorError::Meta(format!(
            "generator expects memory width {memory_dim}, coherence model gives {}",
            conditioner.memory_dim()
        )));
    }
    if conditioner.mode == FusionMode::None {
        log::warn!("fusion mode none: decoding without graph memory, persona attention only");
    }
    let mut store = ParamStore::new();
    let model = GeneratorModel::new(&mut store, config, vocab.len(), memory_dim, vocab.pad())?;
    checkpoint::assign_all(&mut store, &loaded)?;
    Ok((
        manifest,
        Generator {
            model,
            store,
            vocab,
            conditioner,
        },
    ))
}

struct Hypothesis {
    tokens: Vec<usize>,
    score: f64,
    gates: Vec<f64>,
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    logits.iter().map(|x| x - lse).collect()
}

impl Generator {
    /// Generates the response to the last query of `context`.
    pub fn generate(
        &self,
        dialogue_id: &str,
        persona: &[String],
        context: &[String],
        mode: DecodeMode,
    ) -> Result<GenerationOutput, GeneratorError> {
        let cfg = &self.model.config;
        let source = build_encoder_input(&self.vocab, persona, context, cfg.max_source_len)?;
        let dialogue = context_dialogue(dialogue_id, persona, context)?;
        let (memory, types) = self.conditioner.condition(&dialogue)?;
        if memory.is_none() {
            log::debug!("{dialogue_id}: no graph memory");
        }
        let labels: Vec<RelationLabel> = types.iter().map(|t| t.0).collect();
        let prompt = build_prompt(&self.vocab, &labels, cfg.variant);
        let (prefix, _, _) = target_layout(&self.vocab, cfg, &prompt, &[]);
        let encoded = {
            let tape = Tape::new();
            self.model.encode(&tape, &self.store, &source)?.value()
        };
        let step = |tokens: &[usize]| -> Result<(Vec<f64>, Option<f64>), GeneratorError> {
            let (mut logits, trace) = self.model.next_logits(&self.store, &encoded, memory.as_ref(), &labels, tokens)?;
            for (id, l) in logits.iter_mut().enumerate() {
                if self.vocab.is_special(id) && id != self.vocab.eos() && id != self.vocab.unk() {
                    *l = f64::NEG_INFINITY;
                }
            }
            Ok((logits, trace.gate_mean))
        };
        let (tokens, gates, truncated) = match mode {
            DecodeMode::Greedy => self.greedy(&prefix, &step)?,
            DecodeMode::Sample { temperature, seed } => self.sample(&prefix, &step, temperature, seed)?,
            DecodeMode::Beam { width } => self.beam(&prefix, &step, width)?,
        };
        let response_ids = &tokens[prefix.len()..];
        let gate_mean = (!gates.is_empty()).then(|| gates.iter().sum::<f64>() / gates.len() as f64);
        Ok(GenerationOutput {
            dialogue_id: dialogue_id.to_string(),
            response: self.vocab.decode(response_ids),
            predicted_types: labels.iter().map(|l| l.name().to_string()).collect(),
            gate_mean,
            truncated,
        })
    }

    fn greedy<F>(&self, prefix: &[usize], step: &F) -> Result<(Vec<usize>, Vec<f64>, bool), GeneratorError>
    where
        F: Fn(&[usize]) -> Result<(Vec<f64>, Option<f64>), GeneratorError>,
    {
        let mut tokens = prefix.to_vec();
        let mut gates = Vec::new();
        for _ in 0..self.model.config.max_response_len + 1 {
            let (logits, gate) = step(&tokens)?;
            gates.extend(gate);
            let next = argmax(&logits);
            if next == self.vocab.eos() {
                return Ok((tokens, gates, false));
            }
            tokens.push(next);
        }
        tokens.truncate(prefix.len() + self.model.config.max_response_len);
        Ok((tokens, gates, true))
    }

    fn sample<F>(&self, prefix: &[usize], step: &F, temperature: f64, seed: u64) -> Result<(Vec<usize>, Vec<f64>, bool), GeneratorError>
    where
        F: Fn(&[usize]) -> Result<(Vec<f64>, Option<f64>), GeneratorError>,
    {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tokens = prefix.to_vec();
        let mut gates = Vec::new();
        for _ in 0..self.model.config.max_response_len + 1 {
            let (logits, gate) = step(&tokens)?;
            gates.extend(gate);
            let scaled: Vec<f64> = logits.iter().map(|l| l / temperature).collect();
            let probs: Vec<f64> = log_softmax(&scaled).iter().map(|x| x.exp()).collect();
            let next = WeightedIndex::new(&probs)
                .map_err(|e| GeneratorError::Argument(format!("cannot sample: {e}")))?
                .sample(&mut rng);
            if next == self.vocab.eos() {
                return Ok((tokens, gates, false));
            }
            tokens.push(next);
        }
        tokens.truncate(prefix.len() + self.model.config.max_response_len);
        Ok((tokens, gates, true))
    }

    /// Beam search ranked by length-normalized log-probability.
    fn beam<F>(&self, prefix: &[usize], step: &F, width: usize) -> Result<(Vec<usize>, Vec<f64>, bool), GeneratorError>
    where
        F: Fn(&[usize]) -> Result<(Vec<f64>, Option<f64>), GeneratorError>,
    {
        let max_len = self.model.config.max_response_len;
        let norm = |h: &Hypothesis, extra: usize| h.score / (h.tokens.len() - prefix.len() + extra) as f64;
        let mut live = vec![Hypothesis {
            tokens: prefix.to_vec(),
            score: 0.0,
            gates: Vec::new(),
        }];
        let mut done: Vec<(f64, Hypothesis)> = Vec::new();
        for _ in 0..=max_len {
            let mut cands: Vec<(f64, usize, usize, Option<f64>)> = Vec::new();
            for (b, h) in live.iter().enumerate() {
                let (logits, gate) = step(&h.tokens)?;
                for (id, lp) in log_softmax(&logits).into_iter().enumerate() {
                    if lp.is_finite() {
                        cands.push((h.score + lp, b, id, gate));
                    }
                }
            }
            cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
            let mut next = Vec::new();
            for (score, b, id, gate) in cands {
                if next.len() == width {
                    break;
                }
                let parent = &live[b];
                let mut gates = parent.gates.clone();
                gates.extend(gate);
                if id == self.vocab.eos() {
                    let h = Hypothesis {
                        tokens: parent.tokens.clone(),
                        score,
                        gates,
                    };
                    done.push((norm(&h, 1), h));
                    continue;
                }
                let mut tokens = parent.tokens.clone();
                tokens.push(id);
                next.push(Hypothesis { tokens, score, gates });
            }
            if done.len() >= width || next.is_empty() {
                break;
            }
            live = next.into_iter().filter(|h| h.tokens.len() - prefix.len() <= max_len).collect();
            if live.is_empty() {
                break;
            }
        }
        if let Some((_, best)) = done.into_iter().max_by(|a, b| a.0.total_cmp(&b.0)) {
            return Ok((best.tokens, best.gates, false));
        }
        let best = live
            .into_iter()
            .max_by(|a, b| norm(a, 0).total_cmp(&norm(b, 0)))
            .ok_or_else(|| GeneratorError::Argument("beam search produced no hypothesis".into()))?;
        let mut tokens = best.tokens;
        tokens.truncate(prefix.len() + max_len);
        Ok((tokens, best.gates, true))
    }
}

/// An unannotated dialogue over `context`, which alternates user and bot
/// utterances starting with the user.
fn context_dialogue(dialogue_id: &str, persona: &[String], context: &[String]) -> Result<Dialogue, GeneratorError> {
    if persona.iter().all(|p| p.trim().is_empty()) {
        return Err(GeneratorError::Argument(format!("{dialogue_id}: empty persona")));
    }
    Ok(Dialogue {
        dialogue_id: dialogue_id.to_string(),
        persona: persona.to_vec(),
        utterances: context
            .iter()
            .enumerate()
            .map(|(id, text)| Utterance {
                id,
                speaker: if id % 2 == 0 { Speaker::User } else { Speaker::Bot },
                turn_index: id / 2,
                text: text.clone(),
            })
            .collect(),
        annotations: Vec::new(),
    })
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// A persona and a context ending with a query, to be answered.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub dialogue_id: String,
    pub persona: Vec<String>,
    pub context: Vec<String>,
}

/// Answers every request; output order follows input order.
pub fn generate_batch(
    generator: &Generator,
    requests: &[GenerationRequest],
    mode: DecodeMode,
) -> Result<Vec<GenerationOutput>, GeneratorError> {
    requests
        .par_iter()
        .map(|r| generator.generate(&r.dialogue_id, &r.persona, &r.context, mode))
        .collect()
}

/// Shorthand for one request.
pub fn generate(
    generator: &Generator,
    dialogue_id: &str,
    persona: &[String],
    context: &[String],
    mode: DecodeMode,
) -> Result<GenerationOutput, GeneratorError> {
    generator.generate(dialogue_id, persona, context, mode)
}

pub fn write_generations(path: &Path, outputs: &[GenerationOutput]) -> Result<(), GeneratorError> {
    let io = |source| GeneratorError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut f = fs::File::create(path).map_err(io)?;
    for o in outputs {
        let line = serde_json::to_string(o).map_err(|e| GeneratorError::Meta(e.to_string()))?;
        writeln!(f, "{line}").map_err(|source| GeneratorError::Io {
            path: path.display().to_string(),
            source,
        })?;
    }
    Ok(())
}

pub fn read_generations(path: &Path) -> Result<Vec<GenerationOutput>, GeneratorError> {
    let text = fs::read_to_string(path).map_err(|source| GeneratorError::Io {
        path: path.display().to_string(),
        source,
    })?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| GeneratorError::Meta(format!("{}: {e}", path.display()))))
        .collect()
}

