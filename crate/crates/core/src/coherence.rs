//! Relation-aware fine-tuning of the context encoder, the persona encoder,
//! persona/context fusion and the four coherence heads (relation
//! classification, direct and sequential next-response-type prediction,
//! link prediction).

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{multi_hot, RelationLabel, MAX_LABELS, NUM_RELATIONS};
use crate::dialoguegat::{DialogueGat, GatConfig, GatError, GraphInput};
use crate::graphbuild::{DialogueGraph, Edge, GraphPair};
use crate::nn::checkpoint::{self, CheckpointError};
use crate::nn::{batch_gradients, glorot, Adam, Linear, Matrix, Mlp, ParamId, ParamStore, Tape, Var};

#[derive(Debug, Error)]
pub enum CoherenceError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("graph {0} has base edges without relation labels")]
    MissingRelations(String),
    #[error("invalid coherence configuration: {0}")]
    Config(String),
    #[error("training diverged at epoch {epoch}; last good checkpoint kept at {checkpoint:?}")]
    Diverged { epoch: usize, checkpoint: Option<PathBuf> },
    #[error(transparent)]
    Gat(#[from] GatError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("bad checkpoint metadata: {0}")]
    Meta(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// How the generator's graph memory is produced from `H_C` and `H_P`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    #[default]
    Attention,
    Add,
    ContextOnly,
    PersonaOnly,
    Random,
    None,
}

impl FusionMode {
    pub const ALL: [FusionMode; 6] = [
        FusionMode::Attention,
        FusionMode::Add,
        FusionMode::ContextOnly,
        FusionMode::PersonaOnly,
        FusionMode::Random,
        FusionMode::None,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FusionMode::Attention => "attention",
            FusionMode::Add => "add",
            FusionMode::ContextOnly => "context_only",
            FusionMode::PersonaOnly => "persona_only",
            FusionMode::Random => "random",
            FusionMode::None => "none",
        }
    }
}

impl std::str::FromStr for FusionMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown fusion mode {s:?}"))
    }
}

/// Weights of relation classification, direct and sequential
/// next-response-type prediction, and link prediction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DcuWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
}

impl Default for DcuWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 0.5,
            gamma: 0.5,
            delta: 1.0,
        }
    }
}

impl DcuWeights {
    pub fn validate(&self) -> Result<(), CoherenceError> {
        let w = [self.alpha, self.beta, self.gamma, self.delta];
        if w.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return Err(CoherenceError::Config("loss weights must be finite and >= 0".into()));
        }
        if w.iter().all(|&x| x == 0.0) {
            return Err(CoherenceError::Config("loss weights must not all be zero".into()));
        }
        Ok(())
    }
}

impl std::str::FromStr for DcuWeights {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<f64> = s
            .split(',')
            .map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}")))
            .collect::<Result<_, _>>()?;
        match parts[..] {
            [alpha, beta, gamma, delta] => Ok(Self {
                alpha,
                beta,
                gamma,
                delta,
            }),
            _ => Err(format!("expected four comma-separated weights, got {}", parts.len())),
        }
    }
}

/// `alpha l_rc + beta l_direct + gamma l_seq + delta l_lp`.
pub fn dcu_loss(l_rc: f64, l_direct: f64, l_seq: f64, l_lp: f64, w: &DcuWeights) -> f64 {
    w.alpha * l_rc + w.beta * l_direct + w.gamma * l_seq + w.delta * l_lp
}

fn dcu_var<'t>(parts: &HeadLosses<'t>, w: &DcuWeights) -> Var<'t> {
    parts
        .rc
        .scale(w.alpha)
        .add(parts.direct.scale(w.beta))
        .add(parts.seq.scale(w.gamma))
        .add(parts.lp.scale(w.delta))
}

/// Effective-number class weights `(1 - beta) / (1 - beta^n_c)`; classes
/// that never occur get weight 1.
pub fn class_balanced_weights(counts: &[usize], beta: f64) -> Vec<f64> {
    counts
        .iter()
        .map(|&n| if n == 0 { 1.0 } else { (1.0 - beta) / (1.0 - beta.powi(n as i32)) })
        .collect()
}

/// Number of base edges carrying each label.
pub fn label_counts<'a>(graphs: impl IntoIterator<Item = &'a DialogueGraph>) -> [usize; NUM_RELATIONS] {
    let mut counts = [0; NUM_RELATIONS];
    for g in graphs {
        for labels in g.edge_relations.values() {
            for l in labels {
                counts[l.index()] += 1;
            }
        }
    }
    counts
}

/// Multi-head cross-attention from context nodes to persona nodes.
#[derive(Debug, Clone)]
pub struct Fusion {
    /// Per head `(W_Q, W_K, W_V)`, each `[F x F]`.
    pub heads: Vec<(ParamId, ParamId, ParamId)>,
    /// `[heads * F x F]`.
    pub output: ParamId,
    pub dim: usize,
}

impl Fusion {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, dim: usize, num_heads: usize) -> Self {
        let heads = (0..num_heads)
            .map(|h| {
                let name = |p: &str| format!("{prefix}head{h}.{p}");
                (
                    store.add(name("W_Q"), glorot(rng, dim, dim)),
                    store.add(name("W_K"), glorot(rng, dim, dim)),
                    store.add(name("W_V"), glorot(rng, dim, dim)),
                )
            })
            .collect();
        let output = store.add(format!("{prefix}W_O"), glorot(rng, num_heads * dim, dim));
        Self { heads, output, dim }
    }

    /// Returns `H_D` and the per-head attention weights `[N x M]`.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        h_c: Var<'t>,
        h_p: Var<'t>,
    ) -> Result<(Var<'t>, Vec<Var<'t>>), CoherenceError> {
        if h_c.cols() != self.dim || h_p.cols() != self.dim {
            return Err(CoherenceError::Shape(format!(
                "fusion expects width {}, got context {} and persona {}",
                self.dim,
                h_c.cols(),
                h_p.cols()
            )));
        }
        let mut outs = Vec::with_capacity(self.heads.len());
        let mut weights = Vec::with_capacity(self.heads.len());
        for &(wq, wk, wv) in &self.heads {
            let q = h_c.matmul(tape.param(store, wq));
            let k = h_p.matmul(tape.param(store, wk));
            let v = h_p.matmul(tape.param(store, wv));
            let (o, a) = crate::nn::attention(q, k, v, None);
            outs.push(o);
            weights.push(a);
        }
        Ok((Var::concat_cols(&outs).matmul(tape.param(store, self.output)), weights))
    }

    pub fn fuse(&self, store: &ParamStore, h_c: &Matrix, h_p: &Matrix) -> Result<(Matrix, Vec<Matrix>), CoherenceError> {
        let tape = Tape::new();
        let (hd, w) = self.forward(&tape, store, tape.constant(h_c.clone()), tape.constant(h_p.clone()))?;
        Ok((hd.value(), w.iter().map(Var::value).collect()))
    }
}

/// Learned-query attention pooling over positions `<= k`, one summary per
/// position.
#[derive(Debug, Clone)]
pub struct CausalPooler {
    pub query: ParamId,
    pub key: Linear,
}

impl CausalPooler {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, dim: usize) -> Self {
        Self {
            query: store.add(format!("{prefix}query"), glorot(rng, 1, dim)),
            key: Linear::new(store, rng, &format!("{prefix}key"), dim, dim, false),
        }
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, h: Var<'t>) -> Var<'t> {
        let n = h.rows();
        let keys = self.key.forward(tape, store, h);
        let scores = tape.param(store, self.query).matmul(keys.t()).scale(1.0 / (h.cols() as f64).sqrt());
        let rows = tape.constant(Matrix::ones((n, 1))).matmul(scores);
        let causal = Array2::from_shape_fn((n, n), |(q, k)| k <= q);
        rows.softmax_rows(Some(&causal)).matmul(h)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PredictMode {
    #[default]
    Direct,
    Sequential,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CoherenceConfig {
    pub context_gat: GatConfig,
    pub persona_gat: GatConfig,
    pub fusion_heads: usize,
    pub rc_hidden: usize,
    pub weights: DcuWeights,
    pub beta_cb: f64,
    pub negative_ratio: f64,
    pub threshold: f64,
    pub predict_mode: PredictMode,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub val_fraction: f64,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for CoherenceConfig {
    fn default() -> Self {
        let context_gat = GatConfig {
            use_relations: true,
            ..GatConfig::default()
        };
        let persona_gat = GatConfig::plain(context_gat.in_dim, context_gat.hidden_dim, context_gat.out_dim);
        Self {
            context_gat,
            persona_gat,
            fusion_heads: 4,
            rc_hidden: 32,
            weights: DcuWeights::default(),
            beta_cb: 0.999,
            negative_ratio: 1.0,
            threshold: 0.5,
            predict_mode: PredictMode::Direct,
            epochs: 100,
            lr: 1e-3,
            batch_size: 4,
            val_fraction: 0.2,
            clip_norm: 5.0,
            seed: 42,
        }
    }
}

impl CoherenceConfig {
    pub fn validate(&self) -> Result<(), CoherenceError> {
        self.context_gat.validate()?;
        self.persona_gat.validate()?;
        self.weights.validate()?;
        if self.persona_gat.order_channel || self.persona_gat.turn_channel {
            return Err(CoherenceError::Config("the persona encoder has no order or turn channel".into()));
        }
        if self.context_gat.out_dim != self.persona_gat.out_dim {
            return Err(CoherenceError::Config("context and persona encoders must share the output width".into()));
        }
        if self.fusion_heads == 0 || self.rc_hidden == 0 || self.batch_size == 0 {
            return Err(CoherenceError::Config("fusion_heads, rc_hidden and batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta_cb) {
            return Err(CoherenceError::Config("beta_cb must lie in [0, 1)".into()));
        }
        if !(self.negative_ratio >= 0.0 && self.negative_ratio.is_finite()) {
            return Err(CoherenceError::Config("negative_ratio must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.threshold) {
            return Err(CoherenceError::Config("threshold must lie in [0, 1)".into()));
        }
        if self.lr.is_nan() || self.lr <= 0.0 || !(0.0..1.0).contains(&self.val_fraction) {
            return Err(CoherenceError::Config("lr must be positive and val_fraction in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Tensors and targets derived from one graph pair.
#[derive(Debug, Clone)]
pub struct PairInput {
    pub dialogue_id: String,
    pub context: GraphInput,
    pub persona: GraphInput,
    /// Base edges and their multi-hot relation rows.
    pub edges: Vec<Edge>,
    pub edge_targets: Matrix,
    /// Positions `k` whose outgoing edge `(k, k+1)` is labeled, with the
    /// multi-hot rows of those labels.
    pub next_positions: Vec<usize>,
    pub next_targets: Matrix,
    pub negatives: Vec<Edge>,
}

fn multi_hot_rows<'a>(rows: impl ExactSizeIterator<Item = &'a Vec<RelationLabel>>) -> Matrix {
    let mut m = Matrix::zeros((rows.len(), NUM_RELATIONS));
    for (r, labels) in rows.enumerate() {
        m.row_mut(r).assign(&ndarray::ArrayView1::from(&multi_hot(labels)));
    }
    m
}

/// Non-edges `(i, j)`, `i < j`, that are not base edges in either
/// direction, sampled uniformly without replacement.
pub fn sample_negatives(n: usize, positives: &[Edge], ratio: f64, seed: u64) -> Vec<Edge> {
    let candidates: Vec<Edge> = (0..n)
        .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
        .filter(|&(i, j)| !positives.contains(&(i, j)) && !positives.contains(&(j, i)))
        .collect();
    let want = (positives.len() as f64 * ratio).round() as usize;
    if want > candidates.len() {
        log::warn!(
            "graph with {n} nodes has {} non-edges; using them instead of {want} negatives",
            candidates.len()
        );
    }
    let take = want.min(candidates.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked: Vec<Edge> = rand::seq::index::sample(&mut rng, candidates.len(), take)
        .into_iter()
        .map(|k| candidates[k])
        .collect();
    picked.sort_unstable();
    picked
}

impl PairInput {
    pub fn new(pair: &GraphPair, negative_ratio: f64, seed: u64) -> Result<Self, CoherenceError> {
        let g = &pair.context;
        if g.base_edges.iter().any(|e| !g.edge_relations.contains_key(e)) {
            return Err(CoherenceError::MissingRelations(g.dialogue_id.clone()));
        }
        let edges = g.base_edges.clone();
        let edge_targets = multi_hot_rows(edges.iter().map(|e| &g.edge_relations[e]));
        let next: Vec<(usize, &Vec<RelationLabel>)> = (0..g.num_nodes().saturating_sub(1))
            .filter_map(|k| g.edge_relations.get(&(k, k + 1)).map(|l| (k, l)))
            .collect();
        let next_targets = multi_hot_rows(next.iter().map(|(_, l)| *l));
        Ok(Self {
            dialogue_id: g.dialogue_id.clone(),
            context: GraphInput::from_dialogue(g),
            persona: GraphInput::from_persona(&pair.persona),
            negatives: sample_negatives(g.num_nodes(), &edges, negative_ratio, seed),
            edges,
            edge_targets,
            next_positions: next.iter().map(|(k, _)| *k).collect(),
            next_targets,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct HeadLosses<'t> {
    pub rc: Var<'t>,
    pub direct: Var<'t>,
    pub seq: Var<'t>,
    pub lp: Var<'t>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub rc: f64,
    pub direct: f64,
    pub seq: f64,
    pub lp: f64,
    pub dcu: f64,
}

/// Class-weighted BCE over the labels of each edge, averaged over edges
/// and classes.
pub fn relation_classification_loss<'t>(logits: Var<'t>, targets: &Matrix, class_weights: &[f64]) -> Var<'t> {
    let tape = logits.tape();
    if logits.rows() == 0 {
        return tape.scalar(0.0);
    }
    let w = Matrix::from_shape_vec((1, class_weights.len()), class_weights.to_vec()).expect("weight row");
    logits.bce_with_logits(targets).mul_row(tape.constant(w)).mean()
}

/// Mean BCE of multi-label logits; zero when there are no rows.
pub fn multilabel_bce<'t>(logits: Var<'t>, targets: &Matrix) -> Var<'t> {
    if logits.rows() == 0 {
        return logits.tape().scalar(0.0);
    }
    logits.bce_with_logits(targets).mean()
}

/// Inner-product edge logits `h_i . h_j`.
pub fn edge_logits<'t>(h: Var<'t>, edges: &[Edge]) -> Var<'t> {
    let src: Vec<usize> = edges.iter().map(|e| e.0).collect();
    let dst: Vec<usize> = edges.iter().map(|e| e.1).collect();
    h.gather_rows(&src).mul(h.gather_rows(&dst)).sum_cols()
}

/// BCE of `sigmoid(h_i . h_j)` with positives labeled 1, negatives 0.
pub fn link_prediction_loss<'t>(h: Var<'t>, positives: &[Edge], negatives: &[Edge]) -> Var<'t> {
    let tape = h.tape();
    let all: Vec<Edge> = positives.iter().chain(negatives).copied().collect();
    if all.is_empty() {
        return tape.scalar(0.0);
    }
    let labels = Matrix::from_shape_fn((all.len(), 1), |(r, _)| if r < positives.len() { 1.0 } else { 0.0 });
    edge_logits(h, &all).bce_with_logits(&labels).mean()
}

/// Labels with probability above `threshold`, at most three, by descending
/// probability; the argmax alone when none passes.
pub fn predict_response_type(probs: &[f64], threshold: f64) -> Vec<(RelationLabel, f64)> {
    let mut ranked: Vec<(RelationLabel, f64)> = probs
        .iter()
        .enumerate()
        .map(|(i, &p)| (RelationLabel::from_index(i).expect("relation index"), p))
        .collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.index().cmp(&b.0.index())));
    let above = ranked.iter().take_while(|(_, p)| *p > threshold).count();
    ranked.truncate(above.clamp(1, MAX_LABELS));
    ranked
}

#[derive(Debug, Clone)]
pub struct CoherenceModel {
    pub config: CoherenceConfig,
    pub context: DialogueGat,
    pub persona: DialogueGat,
    pub fusion: Fusion,
    pub rc_head: Mlp,
    pub direct_head: Linear,
    pub pooler: CausalPooler,
    pub seq_head: Linear,
}

/// Intermediate representations of one pair.
#[derive(Debug, Clone, Copy)]
pub struct Encoded<'t> {
    pub h_c: Var<'t>,
    pub h_p: Var<'t>,
    pub h_d: Var<'t>,
}

impl CoherenceModel {
    /// Context encoder parameters are named `encoder.*` so that pre-trained
    /// values can be copied in by name.
    pub fn new(store: &mut ParamStore, config: CoherenceConfig) -> Result<Self, CoherenceError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let f = config.context_gat.out_dim;
        let context = DialogueGat::new(store, &mut rng, "encoder.", config.context_gat.clone())?;
        let persona = DialogueGat::new(store, &mut rng, "persona.", config.persona_gat.clone())?;
        let fusion = Fusion::new(store, &mut rng, "fusion.", f, config.fusion_heads);
        let rc_head = Mlp::new(store, &mut rng, "rc", 2 * f, config.rc_hidden, NUM_RELATIONS);
        let direct_head = Linear::new(store, &mut rng, "nrt.direct", f, NUM_RELATIONS, true);
        let pooler = CausalPooler::new(store, &mut rng, "nrt.pool.", f);
        let seq_head = Linear::new(store, &mut rng, "nrt.seq", f, NUM_RELATIONS, true);
        Ok(Self {
            config,
            context,
            persona,
            fusion,
            rc_head,
            direct_head,
            pooler,
            seq_head,
        })
    }

    pub fn encode<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        context: &GraphInput,
        persona: &GraphInput,
    ) -> Result<Encoded<'t>, CoherenceError> {
        let (h_c, _) = self.context.forward(tape, store, context, false)?;
        let (h_p, _) = self.persona.forward(tape, store, persona, false)?;
        let (h_d, _) = self.fusion.forward(tape, store, h_c, h_p)?;
        Ok(Encoded { h_c, h_p, h_d })
    }

    pub fn direct_logits<'t>(&self, tape: &'t Tape, store: &ParamStore, h_d: Var<'t>) -> Var<'t> {
        self.direct_head.forward(tape, store, h_d)
    }

    pub fn sequential_logits<'t>(&self, tape: &'t Tape, store: &ParamStore, h_d: Var<'t>) -> Var<'t> {
        let summary = self.pooler.forward(tape, store, h_d);
        self.seq_head.forward(tape, store, summary)
    }

    pub fn head_losses<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        h_d: Var<'t>,
        input: &PairInput,
        class_weights: &[f64],
    ) -> HeadLosses<'t> {
        let rc = if input.edges.is_empty() {
            tape.scalar(0.0)
        } else {
            let src: Vec<usize> = input.edges.iter().map(|e| e.0).collect();
            let dst: Vec<usize> = input.edges.iter().map(|e| e.1).collect();
            let x = Var::concat_cols(&[h_d.gather_rows(&src), h_d.gather_rows(&dst)]);
            relation_classification_loss(self.rc_head.forward(tape, store, x), &input.edge_targets, class_weights)
        };
        let (direct, seq) = if input.next_positions.is_empty() {
            (tape.scalar(0.0), tape.scalar(0.0))
        } else {
            let d = self.direct_logits(tape, store, h_d).gather_rows(&input.next_positions);
            let s = self.sequential_logits(tape, store, h_d).gather_rows(&input.next_positions);
            (multilabel_bce(d, &input.next_targets), multilabel_bce(s, &input.next_targets))
        };
        let lp = link_prediction_loss(h_d, &input.edges, &input.negatives);
        HeadLosses { rc, direct, seq, lp }
    }

    pub fn losses<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        input: &PairInput,
        class_weights: &[f64],
    ) -> Result<(HeadLosses<'t>, Var<'t>), CoherenceError> {
        let enc = self.encode(tape, store, &input.context, &input.persona)?;
        let parts = self.head_losses(tape, store, enc.h_d, input, class_weights);
        Ok((parts, dcu_var(&parts, &self.config.weights)))
    }

    /// Graph memory for the generator under a fusion mode. `None` for
    /// [`FusionMode::None`].
    pub fn memory(
        &self,
        store: &ParamStore,
        context: &GraphInput,
        persona: &GraphInput,
        mode: FusionMode,
        seed: u64,
    ) -> Result<Option<Matrix>, CoherenceError> {
        let tape = Tape::new();
        let enc = self.encode(&tape, store, context, persona)?;
        let n = context.num_nodes();
        let f = self.fusion.dim;
        let pooled = || {
            let mean = enc.h_p.value().mean_axis(ndarray::Axis(0)).expect("persona rows");
            Matrix::from_shape_fn((n, f), |(_, c)| mean[c])
        };
        Ok(match mode {
            FusionMode::Attention => Some(enc.h_d.value()),
            FusionMode::Add => Some(enc.h_c.value() + pooled()),
            FusionMode::ContextOnly => Some(enc.h_c.value()),
            FusionMode::PersonaOnly => Some(pooled()),
            FusionMode::Random => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                Some(Matrix::from_shape_fn((n, f), |_| rng.gen_range(-1.0..1.0)))
            }
            FusionMode::None => None,
        })
    }

    /// Response types predicted for the utterance after the last context
    /// node, with probabilities.
    pub fn predict_next(
        &self,
        store: &ParamStore,
        context: &GraphInput,
        persona: &GraphInput,
    ) -> Result<Vec<(RelationLabel, f64)>, CoherenceError> {
        let tape = Tape::new();
        let enc = self.encode(&tape, store, context, persona)?;
        let logits = match self.config.predict_mode {
            PredictMode::Direct => self.direct_logits(&tape, store, enc.h_d),
            PredictMode::Sequential => self.sequential_logits(&tape, store, enc.h_d),
        }
        .value();
        let last = logits.row(logits.nrows() - 1);
        let probs: Vec<f64> = last.iter().map(|&x| crate::nn::tape::sigmoid(x)).collect();
        Ok(predict_response_type(&probs, self.config.threshold))
    }

    /// Relation-classification probabilities for the base edges of `input`.
    pub fn relation_probs(&self, store: &ParamStore, input: &PairInput) -> Result<Matrix, CoherenceError> {
        let tape = Tape::new();
        let enc = self.encode(&tape, store, &input.context, &input.persona)?;
        if input.edges.is_empty() {
            return Ok(Matrix::zeros((0, NUM_RELATIONS)));
        }
        let src: Vec<usize> = input.edges.iter().map(|e| e.0).collect();
        let dst: Vec<usize> = input.edges.iter().map(|e| e.1).collect();
        let x = Var::concat_cols(&[enc.h_d.gather_rows(&src), enc.h_d.gather_rows(&dst)]);
        Ok(self.rc_head.forward(&tape, store, x).sigmoid().value())
    }
}

/// Per-class F1 of thresholded predictions; `None` for classes absent from
/// both gold and predictions.
pub fn per_class_f1(probs: &Matrix, gold: &Matrix, threshold: f64) -> Vec<Option<f64>> {
    (0..gold.ncols())
        .map(|c| {
            let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
            for r in 0..gold.nrows() {
                let p = probs[[r, c]] > threshold;
                let g = gold[[r, c]] > 0.5;
                match (p, g) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fneg += 1,
                    _ => {}
                }
            }
            let denom = 2 * tp + fp + fneg;
            (denom > 0).then(|| 2.0 * tp as f64 / denom as f64)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub losses: LossValues,
    pub val_f1: Vec<Option<f64>>,
}

#[derive(Debug, Clone)]
pub struct CoherenceOutcome {
    pub store: ParamStore,
    pub model: CoherenceModel,
    pub log: Vec<EpochLog>,
    pub class_weights: Vec<f64>,
}

pub const COHERENCE_STAGE: &str = "finetune";

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CoherenceError + '_ {
    move |source| CoherenceError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn write_metrics_csv(path: &Path, log: &[EpochLog]) -> Result<(), CoherenceError> {
    let mut text = String::from("epoch,l_rc,l_direct,l_seq,l_lp,l_dcu");
    for l in RelationLabel::ALL {
        text.push_str(&format!(",f1_{}", l.name()));
    }
    text.push('\n');
    for e in log {
        let l = &e.losses;
        text.push_str(&format!("{},{},{},{},{},{}", e.epoch, l.rc, l.direct, l.seq, l.lp, l.dcu));
        for f in &e.val_f1 {
            text.push(',');
            if let Some(v) = f {
                text.push_str(&v.to_string());
            }
        }
        text.push('\n');
    }
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(text.as_bytes()).map_err(io_err(path))
}

fn evaluate(
    model: &CoherenceModel,
    store: &ParamStore,
    items: &[PairInput],
    class_weights: &[f64],
) -> Result<LossValues, CoherenceError> {
    let mut acc = [0.0; 5];
    for input in items {
        let tape = Tape::new();
        let (p, total) = model.losses(&tape, store, input, class_weights)?;
        for (a, v) in acc.iter_mut().zip([p.rc, p.direct, p.seq, p.lp, total]) {
            *a += v.item();
        }
    }
    let n = items.len().max(1) as f64;
    Ok(LossValues {
        rc: acc[0] / n,
        direct: acc[1] / n,
        seq: acc[2] / n,
        lp: acc[3] / n,
        dcu: acc[4] / n,
    })
}

fn validation_f1(
    model: &CoherenceModel,
    store: &ParamStore,
    items: &[PairInput],
) -> Result<Vec<Option<f64>>, CoherenceError> {
    let mut probs = Vec::new();
    let mut gold = Vec::new();
    for input in items {
        let p = model.relation_probs(store, input)?;
        probs.extend(p.iter().copied());
        gold.extend(input.edge_targets.iter().copied());
    }
    let rows = gold.len() / NUM_RELATIONS;
    let probs = Matrix::from_shape_vec((rows, NUM_RELATIONS), probs).expect("probability rows");
    let gold = Matrix::from_shape_vec((rows, NUM_RELATIONS), gold).expect("gold rows");
    Ok(per_class_f1(&probs, &gold, model.config.threshold))
}

fn save_checkpoint(
    dir: &Path,
    config_hash: &str,
    store: &ParamStore,
    cfg: &CoherenceConfig,
    class_weights: &[f64],
    extra: serde_json::Value,
) -> Result<(), CoherenceError> {
    let meta = serde_json::json!({ "coherence": cfg, "class_weights": class_weights, "summary": extra });
    checkpoint::save(dir, COHERENCE_STAGE, config_hash, meta, store)?;
    Ok(())
}

/// Rebuilds a fine-tuned model from its checkpoint directory.
pub fn load_model(dir: &Path) -> Result<(checkpoint::Manifest, CoherenceModel, ParamStore), CoherenceError> {
    let (manifest, loaded) = checkpoint::load(dir)?;
    let cfg: CoherenceConfig = serde_json::from_value(manifest.meta["coherence"].clone())
        .map_err(|e| CoherenceError::Meta(e.to_string()))?;
    let mut store = ParamStore::new();
    let model = CoherenceModel::new(&mut store, cfg)?;
    checkpoint::assign_all(&mut store, &loaded)?;
    Ok((manifest, model, store))
}

/// Fine-tunes on `pairs`, validating relation classification on the
/// trailing `val_fraction`. Context encoder weights present in `init` are
/// copied in before training.
pub fn run_finetuning(
    cfg: &CoherenceConfig,
    pairs: &[GraphPair],
    init: Option<&ParamStore>,
    out: Option<&Path>,
    config_hash: &str,
) -> Result<CoherenceOutcome, CoherenceError> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(CoherenceError::Config("no graphs to fine-tune on".into()));
    }
    let mut store = ParamStore::new();
    let model = CoherenceModel::new(&mut store, cfg.clone())?;
    if let Some(src) = init {
        let copied = store.copy_matching(src, "encoder.", "encoder.");
        log::info!("initialized {copied} context-encoder tensors from pre-training");
    }
    let items: Vec<PairInput> = pairs
        .iter()
        .enumerate()
        .map(|(k, p)| PairInput::new(p, cfg.negative_ratio, cfg.seed.wrapping_add(1 + k as u64)))
        .collect::<Result<_, _>>()?;
    let n_val = ((items.len() as f64) * cfg.val_fraction).floor() as usize;
    let n_val = n_val.min(items.len() - 1);
    let (train, val) = items.split_at(items.len() - n_val);
    let counts = label_counts(pairs[..train.len()].iter().map(|p| &p.context));
    let class_weights = class_balanced_weights(&counts, cfg.beta_cb);

    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let mut adam = Adam::new(cfg.lr).with_clip(cfg.clip_norm);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x434f_4845);
    let val_f1 = |store: &ParamStore| -> Result<Vec<Option<f64>>, CoherenceError> {
        if val.is_empty() {
            Ok(vec![None; NUM_RELATIONS])
        } else {
            validation_f1(&model, store, val)
        }
    };
    let mut log = vec![EpochLog {
        epoch: 0,
        losses: evaluate(&model, &store, train, &class_weights)?,
        val_f1: val_f1(&store)?,
    }];
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&PairInput> = chunk.iter().map(|&k| &train[k]).collect();
            let (total, mut grads, count) = batch_gradients(&store, &batch, |tape, store, item| {
                model.losses(tape, store, item, &class_weights).ok().map(|(_, l)| l)
            });
            if !total.is_finite() || !grads.all_finite() {
                return Err(abort(out, config_hash, &store, cfg, &class_weights, epoch));
            }
            grads.scale(1.0 / count.max(1) as f64);
            adam.step(&mut store, &grads);
            model.context.project(&mut store);
            model.persona.project(&mut store);
        }
        let losses = evaluate(&model, &store, train, &class_weights)?;
        if !losses.dcu.is_finite() {
            return Err(abort(out, config_hash, &store, cfg, &class_weights, epoch));
        }
        log::debug!("finetune epoch {epoch}: l_dcu {:.5}", losses.dcu);
        log.push(EpochLog {
            epoch,
            losses,
            val_f1: val_f1(&store)?,
        });
    }
    if let Some(dir) = out {
        write_metrics_csv(&dir.join("metrics.csv"), &log)?;
        let extra = serde_json::json!({ "train_graphs": train.len(), "val_graphs": val.len() });
        save_checkpoint(dir, config_hash, &store, cfg, &class_weights, extra)?;
    }
    Ok(CoherenceOutcome {
        store,
        model,
        log,
        class_weights,
    })
}

fn abort(
    out: Option<&Path>,
    config_hash: &str,
    store: &ParamStore,
    cfg: &CoherenceConfig,
    class_weights: &[f64],
    epoch: usize,
) -> CoherenceError {
    let checkpoint = out.and_then(|dir| {
        let extra = serde_json::json!({ "diverged_at": epoch });
        save_checkpoint(dir, config_hash, store, cfg, class_weights, extra)
            .ok()
            .map(|_| dir.to_path_buf())
    });
    CoherenceError::Diverged { epoch, checkpoint }
}
