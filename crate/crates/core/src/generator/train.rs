use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{DecoderInput, GeneratorModel};
use super::vocab::{build_encoder_input, build_prompt, Vocabulary};
use super::{GeneratorConfig, GeneratorError};
use crate::coherence::{CoherenceModel, FusionMode};
use crate::corpus::{annotate_all, Dialogue, HeuristicAnnotator, RelationLabel, Speaker};
use crate::dialoguegat::GraphInput;
use crate::graphbuild::{build_pair, EmbeddingProvider};
use crate::nn::checkpoint;
use crate::nn::{batch_gradients, Adam, Matrix, ParamStore, Tape};

pub const GENERATOR_STAGE: &str = "train-generator";

/// Graph memory (when available) and predicted response types.
pub type Conditioning = (Option<Matrix>, Vec<(RelationLabel, f64)>);

/// Supplies graph memory and predicted response types from a trained
/// coherence model.
pub struct Conditioner {
    pub model: CoherenceModel,
    pub store: ParamStore,
    pub embedder: Box<dyn EmbeddingProvider + Send>,
    /// Order window used to build context graphs.
    pub d: usize,
    pub mode: FusionMode,
    pub seed: u64,
}

impl Conditioner {
    pub fn memory_dim(&self) -> usize {
        self.model.fusion.dim
    }

    /// Memory and response types for the utterances of `dialogue`.
    /// Unannotated dialogues are labeled with the heuristic annotator.
    pub fn condition(&self, dialogue: &Dialogue) -> Result<Conditioning, GeneratorError> {
        let annotated;
        let dialogue = if dialogue.is_annotated() {
            dialogue
        } else {
            annotated = annotate_all(std::slice::from_ref(dialogue), &HeuristicAnnotator).remove(0);
            &annotated
        };
        let pair = build_pair(dialogue, self.embedder.as_ref(), self.d, self.embedder.dim())?;
        let context = GraphInput::from_dialogue(&pair.context);
        let persona = GraphInput::from_persona(&pair.persona);
        let types = self.model.predict_next(&self.store, &context, &persona)?;
        let seed = self.seed ^ fnv(&dialogue.dialogue_id) ^ dialogue.len() as u64;
        let memory = self.model.memory(&self.store, &context, &persona, self.mode, seed)?;
        Ok((memory, types))
    }
}

fn fnv(s: &str) -> u64 {
    s.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3))
}

/// One response to predict, with its conditioning precomputed.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub dialogue_id: String,
    pub persona: Vec<String>,
    /// Utterance texts before the response, ending with a query.
    pub context: Vec<String>,
    pub response: String,
    pub types: Vec<(RelationLabel, f64)>,
    pub input: DecoderInput,
    /// Decoder positions that predict the response, and their targets.
    pub rows: Vec<usize>,
    pub targets: Vec<usize>,
}

/// Decoder input `[BOS] prompt [RSP] response` and the rows/targets that
/// score `response [EOS]`.
pub(crate) fn target_layout(
    vocab: &Vocabulary,
    cfg: &GeneratorConfig,
    prompt: &[usize],
    response: &[usize],
) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let mut seq = vec![vocab.bos()];
    seq.extend(prompt.iter().take(cfg.max_prompt_len));
    let rsp_at = seq.len();
    seq.push(vocab.rsp());
    seq.extend(response.iter().take(cfg.max_response_len));
    seq.push(vocab.eos());
    let (input, next) = super::vocab::teacher_forcing(&seq);
    let rows: Vec<usize> = (rsp_at..input.len()).collect();
    let targets = next[rsp_at..].to_vec();
    (input, rows, targets)
}

/// Every bot utterance preceded by an odd number of utterances becomes an
/// example. With `conditioner == None` the examples carry no memory and no
/// prompt, as used by the persona pre-stage.
pub fn build_examples(
    dialogues: &[Dialogue],
    vocab: &Vocabulary,
    cfg: &GeneratorConfig,
    conditioner: Option<&Conditioner>,
) -> Result<Vec<TrainingExample>, GeneratorError> {
    let mut out = Vec::new();
    for d in dialogues {
        for t in (1..d.len()).step_by(2) {
            if d.utterances[t].speaker != Speaker::Bot {
                continue;
            }
            let prefix = d.prefix(t);
            let context: Vec<String> = prefix.utterances.iter().map(|u| u.text.clone()).collect();
            let source = build_encoder_input(vocab, &d.persona, &context, cfg.max_source_len)?;
            let (memory, types) = match conditioner {
                Some(c) => c.condition(&prefix)?,
                None => (None, Vec::new()),
            };
            let labels: Vec<RelationLabel> = types.iter().map(|t| t.0).collect();
            let prompt = match conditioner {
                Some(_) => build_prompt(vocab, &labels, cfg.variant),
                None => Vec::new(),
            };
            let response = d.utterances[t].text.clone();
            let (target, rows, targets) = target_layout(vocab, cfg, &prompt, &vocab.encode(&response));
            out.push(TrainingExample {
                dialogue_id: d.dialogue_id.clone(),
                persona: d.persona.clone(),
                context,
                response,
                types,
                input: DecoderInput {
                    source,
                    target,
                    memory,
                    types: labels,
                },
                rows,
                targets,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    /// `persona` for the pre-stage, `generator` afterwards.
    pub stage: String,
    pub epoch: usize,
    /// Mean token loss over the epoch's minibatches.
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct GeneratorOutcome {
    pub store: ParamStore,
    pub model: GeneratorModel,
    pub vocab: Vocabulary,
    pub log: Vec<EpochLog>,
    /// Per-token loss of the final parameters on the training examples.
    pub final_loss: f64,
    /// Whether the loss strictly decreased over the first ten generator
    /// epochs.
    pub early_descent: bool,
}

/// Mean token loss of `examples` under the current parameters.
pub fn mean_token_loss(model: &GeneratorModel, store: &ParamStore, examples: &[TrainingExample]) -> Result<f64, GeneratorError> {
    let tokens: usize = examples.iter().map(|e| e.rows.len()).sum();
    let (total, _, _) = batch_gradients(store, examples, |tape: &Tape, store, ex: &TrainingExample| {
        model.nll(tape, store, &ex.input, &ex.rows, &ex.targets).ok()
    });
    Ok(total / tokens.max(1) as f64)
}

fn strictly_decreasing(log: &[EpochLog]) -> bool {
    log.windows(2).all(|w| w[1].loss < w[0].loss)
}

struct Trainer<'a> {
    cfg: &'a GeneratorConfig,
    model: &'a GeneratorModel,
    out: Option<&'a Path>,
    config_hash: &'a str,
    meta: serde_json::Value,
}

impl Trainer<'_> {
    fn run(
        &self,
        store: &mut ParamStore,
        examples: &[TrainingExample],
        epochs: usize,
        stage: &str,
        seed: u64,
        log: &mut Vec<EpochLog>,
    ) -> Result<(), GeneratorError> {
        let mut opt = Adam::new(self.cfg.lr).with_clip(self.cfg.clip_norm);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..examples.len()).collect();
        let mut last_good = store.clone();
        for epoch in 0..epochs {
            order.shuffle(&mut rng);
            let (mut epoch_loss, mut epoch_tokens) = (0.0, 0usize);
            for chunk in order.chunks(self.cfg.batch_size) {
                let batch: Vec<&TrainingExample> = chunk.iter().map(|&i| &examples[i]).collect();
                let tokens: usize = batch.iter().map(|e| e.rows.len()).sum();
                let (loss, mut grads, _) = batch_gradients(store, &batch, |tape: &Tape, store, ex: &&TrainingExample| {
                    self.model.nll(tape, store, &ex.input, &ex.rows, &ex.targets).ok()
                });
                if !loss.is_finite() || !grads.all_finite() {
                    return Err(self.abort(epoch, &last_good));
                }
                grads.scale(1.0 / tokens.max(1) as f64);
                opt.step(store, &grads);
                epoch_loss += loss;
                epoch_tokens += tokens;
            }
            let loss = epoch_loss / epoch_tokens.max(1) as f64;
            log::debug!("{stage} epoch {epoch}: token loss {loss:.4}");
            log.push(EpochLog {
                stage: stage.to_string(),
                epoch,
                loss,
            });
            last_good.clone_from(store);
        }
        Ok(())
    }

    fn abort(&self, epoch: usize, last_good: &ParamStore) -> GeneratorError {
        let checkpoint = self.out.and_then(|dir| {
            checkpoint::save(dir, GENERATOR_STAGE, self.config_hash, self.meta.clone(), last_good)
                .ok()
                .map(|_| dir.to_path_buf())
        });
        GeneratorError::Diverged { epoch, checkpoint }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> GeneratorError + '_ {
    move |source| GeneratorError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn write_loss_csv(path: &Path, log: &[EpochLog]) -> Result<(), GeneratorError> {
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    let mut text = String::from("stage,epoch,token_loss\n");
    for l in log {
        text.push_str(&format!("{},{},{}\n", l.stage, l.epoch, l.loss));
    }
    f.write_all(text.as_bytes()).map_err(io_err(path))
}

pub(crate) fn checkpoint_meta(cfg: &GeneratorConfig, vocab: &Vocabulary, memory_dim: usize, mode: FusionMode) -> serde_json::Value {
    serde_json::json!({
        "generator": cfg,
        "vocab": vocab,
        "memory_dim": memory_dim,
        "fusion_mode": mode,
    })
}

/// Trains the persona pre-stage (no prompt, no graph memory) and then the
/// full generator, initialized from the pre-stage parameters.
pub fn run_generator_training(
    cfg: &GeneratorConfig,
    dialogues: &[Dialogue],
    conditioner: &Conditioner,
    out: Option<&Path>,
    config_hash: &str,
) -> Result<GeneratorOutcome, GeneratorError> {
    cfg.validate()?;
    let vocab = Vocabulary::from_corpus(dialogues);
    let mut store = ParamStore::new();
    let model = GeneratorModel::new(&mut store, cfg.clone(), vocab.len(), conditioner.memory_dim(), vocab.pad())?;
    let plain = build_examples(dialogues, &vocab, cfg, None)?;
    let examples = build_examples(dialogues, &vocab, cfg, Some(conditioner))?;
    if examples.is_empty() {
        return Err(GeneratorError::Argument("corpus yields no bot responses to train on".into()));
    }
    if conditioner.mode == FusionMode::None {
        log::warn!("fusion mode none: generator trains without graph memory");
    }
    let meta = checkpoint_meta(cfg, &vocab, conditioner.memory_dim(), conditioner.mode);
    let trainer = Trainer {
        cfg,
        model: &model,
        out,
        config_hash,
        meta: meta.clone(),
    };
    let mut log = Vec::new();
    trainer.run(&mut store, &plain, cfg.persona_epochs, "persona", cfg.seed ^ 0x5045_5253, &mut log)?;
    let start = log.len();
    trainer.run(&mut store, &examples, cfg.epochs, "generator", cfg.seed ^ 0x4745_4e52, &mut log)?;
    let head = &log[start..(start + 10).min(log.len())];
    let early_descent = strictly_decreasing(head);
    if !early_descent {
        log::warn!("generator loss did not decrease strictly over its first {} epochs", head.len());
    }
    let final_loss = mean_token_loss(&model, &store, &examples)?;
    if let Some(dir) = out {
        let mut meta = meta;
        meta["summary"] = serde_json::json!({
            "final_token_loss": final_loss,
            "early_descent": early_descent,
            "examples": examples.len(),
        });
        checkpoint::save(dir, GENERATOR_STAGE, config_hash, meta, &store)?;
        write_loss_csv(&dir.join("losses.csv"), &log)?;
    }
    Ok(GeneratorOutcome {
        store,
        model,
        vocab,
        log,
        final_loss,
        early_descent,
    })
}
