use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{GeneratorConfig, GeneratorError};
use crate::corpus::{RelationLabel, NUM_RELATIONS};
use crate::nn::{attention, uniform, Linear, Matrix, ParamId, ParamStore, Tape, Var};

const LN_EPS: f64 = 1e-5;

/// Gate projection and per-dimension mask of one decoder block.
#[derive(Debug, Clone, Copy)]
pub struct DwaParams {
    /// `[2d x d]` projection of `[c_persona | c_coherence]`.
    pub gate: Linear,
    /// `[1 x d]` mask logits.
    pub mask: ParamId,
    pub tau: f64,
}

impl DwaParams {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, dim: usize, tau: f64) -> Self {
        Self {
            gate: Linear::new(store, rng, &format!("{prefix}gate"), 2 * dim, dim, true),
            mask: store.add(format!("{prefix}mask"), Matrix::zeros((1, dim))),
            tau,
        }
    }
}

/// Selects, per row and dimension, either `c_persona` (where
/// `sigmoid(gate) * sigmoid(mask) > tau`) or `c_coherence`. The decision
/// passes gradients straight through when `straight_through` is set and is
/// treated as a constant otherwise. Returns the output and the decision.
pub fn dynamic_weighted_aggregation<'t>(
    tape: &'t Tape,
    store: &ParamStore,
    dwa: &DwaParams,
    c_persona: Var<'t>,
    c_coherence: Var<'t>,
    straight_through: bool,
) -> (Var<'t>, Var<'t>) {
    let g = dwa.gate.forward(tape, store, Var::concat_cols(&[c_persona, c_coherence])).sigmoid();
    let m = tape.param(store, dwa.mask).sigmoid();
    let mut b = g.mul_row(m).step_ste(dwa.tau);
    if !straight_through {
        b = tape.constant(b.value());
    }
    (b.mul(c_persona).add(b.one_minus().mul(c_coherence)), b)
}

#[derive(Debug, Clone)]
struct MultiHead {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
}

impl MultiHead {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, dim: usize, heads: usize) -> Self {
        let lin = |store: &mut ParamStore, rng: &mut ChaCha8Rng, n: &str| {
            Linear::new(store, rng, &format!("{prefix}{n}"), dim, dim, false)
        };
        Self {
            q: lin(store, rng, "W_Q"),
            k: lin(store, rng, "W_K"),
            v: lin(store, rng, "W_V"),
            o: lin(store, rng, "W_O"),
            heads,
        }
    }

    fn forward<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        query: Var<'t>,
        source: Var<'t>,
        allowed: Option<&Array2<bool>>,
    ) -> (Var<'t>, Vec<Var<'t>>) {
        let q = self.q.forward(tape, store, query);
        let k = self.k.forward(tape, store, source);
        let v = self.v.forward(tape, store, source);
        let width = q.cols() / self.heads;
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (a, b) = (h * width, (h + 1) * width);
            let (o, w) = attention(q.slice_cols(a, b), k.slice_cols(a, b), v.slice_cols(a, b), allowed);
            outs.push(o);
            weights.push(w);
        }
        (self.o.forward(tape, store, Var::concat_cols(&outs)), weights)
    }
}

#[derive(Debug, Clone)]
struct FeedForward {
    up: Linear,
    down: Linear,
}

impl FeedForward {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, dim: usize, hidden: usize) -> Self {
        Self {
            up: Linear::new(store, rng, &format!("{prefix}ffn.up"), dim, hidden, true),
            down: Linear::new(store, rng, &format!("{prefix}ffn.down"), hidden, dim, true),
        }
    }

    fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>) -> Var<'t> {
        self.down.forward(tape, store, self.up.forward(tape, store, x).relu())
    }
}

#[derive(Debug, Clone)]
struct EncoderLayer {
    attn: MultiHead,
    ffn: FeedForward,
}

#[derive(Debug, Clone)]
struct DecoderLayer {
    self_attn: MultiHead,
    persona_attn: MultiHead,
    coherence_attn: MultiHead,
    dwa: DwaParams,
    ffn: FeedForward,
}

/// Everything the decoder consumes besides parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderInput {
    /// Encoder token ids.
    pub source: Vec<usize>,
    /// Decoder token ids, starting with `[BOS]`.
    pub target: Vec<usize>,
    /// Graph memory `[nodes x memory_dim]`; `None` runs without coherence
    /// attention.
    pub memory: Option<Matrix>,
    /// Predicted response types, most probable first.
    pub types: Vec<RelationLabel>,
}

/// Per-call statistics of the aggregation decisions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepTrace {
    /// Fraction of decisions that picked the persona branch, over all
    /// decoder blocks and positions; `None` without memory.
    pub gate_mean: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct GeneratorModel {
    pub config: GeneratorConfig,
    pub vocab_size: usize,
    pub memory_dim: usize,
    pub pad_id: usize,
    /// When false the aggregation decision is a constant in the backward
    /// pass, which makes the loss piecewise smooth for finite differences.
    pub straight_through: bool,
    pub token_embedding: ParamId,
    pub source_positions: ParamId,
    pub target_positions: ParamId,
    pub relation_embedding: ParamId,
    memory_proj: Linear,
    encoder: Vec<EncoderLayer>,
    decoder: Vec<DecoderLayer>,
    lm_head: Linear,
}

impl GeneratorModel {
    pub fn new(
        store: &mut ParamStore,
        config: GeneratorConfig,
        vocab_size: usize,
        memory_dim: usize,
        pad_id: usize,
    ) -> Result<Self, GeneratorError> {
        config.validate()?;
        if memory_dim == 0 || vocab_size <= pad_id {
            return Err(GeneratorError::Config("memory_dim and vocabulary must be non-empty".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.d_model;
        let token_embedding = store.add("gen.tok_emb", uniform(&mut rng, vocab_size, d, 0.1));
        let source_positions = store.add("gen.src_pos", uniform(&mut rng, config.max_source_len, d, 0.1));
        let target_positions = store.add("gen.tgt_pos", uniform(&mut rng, config.max_target_len(), d, 0.1));
        let relation_embedding = store.add("gen.rel_emb", uniform(&mut rng, NUM_RELATIONS, d, 0.1));
        let memory_proj = Linear::new(store, &mut rng, "gen.mem_proj", memory_dim, d, true);
        let encoder = (0..config.encoder_layers)
            .map(|l| {
                let p = format!("gen.enc{l}.");
                EncoderLayer {
                    attn: MultiHead::new(store, &mut rng, &format!("{p}attn."), d, config.heads),
                    ffn: FeedForward::new(store, &mut rng, &p, d, config.ffn_dim),
                }
            })
            .collect();
        let decoder = (0..config.decoder_layers)
            .map(|l| {
                let p = format!("gen.dec{l}.");
                DecoderLayer {
                    self_attn: MultiHead::new(store, &mut rng, &format!("{p}self."), d, config.heads),
                    persona_attn: MultiHead::new(store, &mut rng, &format!("{p}persona."), d, config.heads),
                    coherence_attn: MultiHead::new(store, &mut rng, &format!("{p}coherence."), d, config.heads),
                    dwa: DwaParams::new(store, &mut rng, &format!("{p}dwa."), d, config.tau),
                    ffn: FeedForward::new(store, &mut rng, &p, d, config.ffn_dim),
                }
            })
            .collect();
        let lm_head = Linear::new(store, &mut rng, "gen.lm_head", d, vocab_size, true);
        Ok(Self {
            config,
            vocab_size,
            memory_dim,
            pad_id,
            straight_through: true,
            token_embedding,
            source_positions,
            target_positions,
            relation_embedding,
            memory_proj,
            encoder,
            decoder,
            lm_head,
        })
    }

    /// Parameters of the aggregation gates and masks.
    pub fn dwa_params(&self) -> Vec<DwaParams> {
        self.decoder.iter().map(|l| l.dwa).collect()
    }

    fn embed<'t>(&self, tape: &'t Tape, store: &ParamStore, ids: &[usize], table: ParamId, positions: &[usize]) -> Result<Var<'t>, GeneratorError> {
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.vocab_size) {
            return Err(GeneratorError::Argument(format!("token id {bad} outside vocabulary")));
        }
        let limit = store.get(table).nrows();
        if positions.iter().any(|&p| p >= limit) {
            return Err(GeneratorError::Argument(format!("sequence longer than position table ({limit})")));
        }
        let tok = tape.param(store, self.token_embedding).gather_rows(ids);
        Ok(tok.add(tape.param(store, table).gather_rows(positions)))
    }

    /// Encoder states `[S x d]`.
    pub fn encode<'t>(&self, tape: &'t Tape, store: &ParamStore, source: &[usize]) -> Result<Var<'t>, GeneratorError> {
        if source.is_empty() {
            return Err(GeneratorError::Argument("empty encoder input".into()));
        }
        let positions: Vec<usize> = (0..source.len()).collect();
        let mut x = self.embed(tape, store, source, self.source_positions, &positions)?;
        for layer in &self.encoder {
            let h = x.layer_norm(LN_EPS);
            x = x.add(layer.attn.forward(tape, store, h, h, None).0);
            x = x.add(layer.ffn.forward(tape, store, x.layer_norm(LN_EPS)));
        }
        Ok(x.layer_norm(LN_EPS))
    }

    /// Mean relation embedding of `types` for variants that use it.
    fn relation_query<'t>(&self, tape: &'t Tape, store: &ParamStore, types: &[RelationLabel]) -> Option<Var<'t>> {
        if !self.config.variant.uses_embeddings() || types.is_empty() {
            return None;
        }
        let idx: Vec<usize> = types.iter().map(|t| t.index()).collect();
        Some(tape.param(store, self.relation_embedding).gather_rows(&idx).mean_rows())
    }

    /// Final decoder states `[T x d]`. `[PAD]` tokens are invisible as keys
    /// and do not advance positions.
    pub fn decode_states<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        encoded: Var<'t>,
        memory: Option<Var<'t>>,
        types: &[RelationLabel],
        target: &[usize],
    ) -> Result<(Var<'t>, StepTrace), GeneratorError> {
        if target.is_empty() {
            return Err(GeneratorError::Argument("empty decoder input".into()));
        }
        let mut positions = Vec::with_capacity(target.len());
        let mut seen = 0;
        for &t in target {
            positions.push(seen);
            if t != self.pad_id {
                seen += 1;
            }
        }
        let n = target.len();
        let causal = Array2::from_shape_fn((n, n), |(q, k)| k <= q && target[k] != self.pad_id);
        let mut x = self.embed(tape, store, target, self.target_positions, &positions)?;
        let mem = match memory {
            Some(m) => {
                if m.cols() != self.memory_dim || m.rows() == 0 {
                    return Err(GeneratorError::Argument(format!(
                        "memory must be [nodes x {}], got {:?}",
                        self.memory_dim,
                        m.shape()
                    )));
                }
                Some(self.memory_proj.forward(tape, store, m))
            }
            None => None,
        };
        let r_emb = self.relation_query(tape, store, types);
        let (mut picked, mut total) = (0.0, 0usize);
        for layer in &self.decoder {
            let h = x.layer_norm(LN_EPS);
            x = x.add(layer.self_attn.forward(tape, store, h, h, Some(&causal)).0);
            let h = x.layer_norm(LN_EPS);
            let c_p = layer.persona_attn.forward(tape, store, h, encoded, None).0;
            match mem {
                Some(mem) => {
                    let q = match r_emb {
                        Some(r) => h.add_row(r),
                        None => h,
                    };
                    let c_c = layer.coherence_attn.forward(tape, store, q, mem, None).0;
                    let (out, b) = dynamic_weighted_aggregation(tape, store, &layer.dwa, c_p, c_c, self.straight_through);
                    let bv = b.value();
                    picked += bv.sum();
                    total += bv.len();
                    x = x.add(out);
                }
                None => x = x.add(c_p),
            }
            x = x.add(layer.ffn.forward(tape, store, x.layer_norm(LN_EPS)));
        }
        let trace = StepTrace {
            gate_mean: (total > 0).then(|| picked / total as f64),
        };
        Ok((x.layer_norm(LN_EPS), trace))
    }

    /// Vocabulary logits for the decoder positions in `rows` (all positions
    /// when `None`).
    pub fn logits<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        input: &DecoderInput,
        rows: Option<&[usize]>,
    ) -> Result<(Var<'t>, StepTrace), GeneratorError> {
        let encoded = self.encode(tape, store, &input.source)?;
        let memory = input.memory.as_ref().map(|m| tape.constant(m.clone()));
        let (states, trace) = self.decode_states(tape, store, encoded, memory, &input.types, &input.target)?;
        let states = match rows {
            Some(r) => states.gather_rows(r),
            None => states,
        };
        Ok((self.lm_head.forward(tape, store, states), trace))
    }

    /// Logits for the last decoder position given precomputed encoder
    /// states.
    pub fn next_logits(
        &self,
        store: &ParamStore,
        encoded: &Matrix,
        memory: Option<&Matrix>,
        types: &[RelationLabel],
        target: &[usize],
    ) -> Result<(Vec<f64>, StepTrace), GeneratorError> {
        let tape = Tape::new();
        let enc = tape.constant(encoded.clone());
        let memory = memory.map(|m| tape.constant(m.clone()));
        let (states, trace) = self.decode_states(&tape, store, enc, memory, types, target)?;
        let last = states.gather_rows(&[target.len() - 1]);
        Ok((self.lm_head.forward(&tape, store, last).value().iter().copied().collect(), trace))
    }

    /// Summed token negative log-likelihood of `targets[k]` at decoder
    /// position `rows[k]`.
    pub fn nll<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        input: &DecoderInput,
        rows: &[usize],
        targets: &[usize],
    ) -> Result<Var<'t>, GeneratorError> {
        if rows.len() != targets.len() || rows.is_empty() {
            return Err(GeneratorError::Argument("rows and targets must be non-empty and aligned".into()));
        }
        let (logits, _) = self.logits(tape, store, input, Some(rows))?;
        Ok(logits.row_nll(targets).sum())
    }

    /// Logits of every decoder position as a plain matrix.
    pub fn logits_matrix(&self, store: &ParamStore, input: &DecoderInput) -> Result<Matrix, GeneratorError> {
        let tape = Tape::new();
        Ok(self.logits(&tape, store, input, None)?.0.value())
    }
}
