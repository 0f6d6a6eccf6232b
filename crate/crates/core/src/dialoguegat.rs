//! DialogueGAT: GATv2-style graph attention with two extra channels.
//!
//! Every head scores an edge `(i, j)` (message from `i` into `j`) from
//! `LeakyReLU([W h_i || W h_j])` with one attention vector per channel:
//!
//! * base: `a^T x`, over the relation-bearing base edges,
//! * order: `(a_order^T x) * s_ij` with `s_ij = exp(-lambda |order_i - order_j|)`,
//!   over the order-window edges,
//! * turn: `(a_turn^T x) * t_ij`, over the same-turn edges.
//!
//! In the default [`CombineMode::Separate`] each channel is softmax-normalized
//! over the incoming edges of `j` and the channel messages are averaged over
//! the channels that reach `j`. [`CombineMode::Joint`] instead normalizes all
//! incoming scores of `j` in one softmax. Nodes without incoming edges on any
//! channel pass through `W h_j`.
//!
//! Hidden layers concatenate heads; the final layer averages them. ELU is
//! applied after every layer.

use std::collections::BTreeMap;

use ndarray::Array1;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{multi_hot, NUM_RELATIONS};
use crate::graphbuild::{DialogueGraph, Edge, PersonaGraph};
use crate::nn::{glorot, Matrix, ParamId, ParamStore, Tape, Var};

#[derive(Debug, Error, PartialEq)]
pub enum GatError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid GAT configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CombineMode {
    #[default]
    Separate,
    Joint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GatConfig {
    pub in_dim: usize,
    /// Per-head width of hidden layers (heads are concatenated).
    pub hidden_dim: usize,
    /// Width of the final layer (heads are averaged).
    pub out_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub lambda_decay: f64,
    pub lambda_learnable: bool,
    pub leaky_slope: f64,
    pub combine: CombineMode,
    pub order_channel: bool,
    pub turn_channel: bool,
    /// Adds learnable relation embeddings to the source term of base edges.
    pub use_relations: bool,
    pub self_loops: bool,
}

impl Default for GatConfig {
    fn default() -> Self {
        Self {
            in_dim: 64,
            hidden_dim: 16,
            out_dim: 64,
            num_layers: 2,
            num_heads: 4,
            lambda_decay: 0.5,
            lambda_learnable: false,
            leaky_slope: 0.2,
            combine: CombineMode::Separate,
            order_channel: true,
            turn_channel: true,
            use_relations: false,
            self_loops: false,
        }
    }
}

impl GatConfig {
    /// Plain GATv2: base channel only.
    pub fn plain(in_dim: usize, hidden_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            hidden_dim,
            out_dim,
            order_channel: false,
            turn_channel: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), GatError> {
        let fail = |m: &str| Err(GatError::Config(m.to_string()));
        if self.num_layers == 0 || self.num_heads == 0 {
            return fail("need at least one layer and one head");
        }
        if self.in_dim == 0 || self.hidden_dim == 0 || self.out_dim == 0 {
            return fail("dimensions must be positive");
        }
        if !(self.lambda_decay >= 0.0 && self.lambda_decay.is_finite()) {
            return fail("lambda_decay must be finite and >= 0");
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return fail("leaky_slope must lie in (0, 1)");
        }
        Ok(())
    }

    fn layer_dims(&self, layer: usize) -> (usize, usize) {
        let input = if layer == 0 {
            self.in_dim
        } else {
            self.hidden_dim * self.num_heads
        };
        let output = if layer + 1 == self.num_layers {
            self.out_dim
        } else {
            self.hidden_dim
        };
        (input, output)
    }
}

/// `exp(-lambda |order_i - order_j|) * I(i, j, d)`.
pub fn order_decay(order_i: usize, order_j: usize, d: usize, lambda_decay: f64) -> f64 {
    let indicator = order_j > order_i && order_j - order_i < d;
    if !indicator {
        return 0.0;
    }
    (-lambda_decay * order_i.abs_diff(order_j) as f64).exp()
}

/// Plain-value parameters of one head, for inspection and scoring.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadValues {
    /// `[F_out x F_in]`.
    pub w: Matrix,
    pub a_base: Array1<f64>,
    pub a_order: Array1<f64>,
    pub a_turn: Array1<f64>,
}

/// Base, order and turn scores of one edge.
pub fn channel_scores(
    h_i: &[f64],
    h_j: &[f64],
    head: &HeadValues,
    leaky_slope: f64,
    s_ij: f64,
    t_ij: f64,
) -> Result<(f64, f64, f64), GatError> {
    let (f_out, f_in) = head.w.dim();
    if h_i.len() != f_in || h_j.len() != f_in {
        return Err(GatError::Shape(format!(
            "node features have width {}/{}, W expects {f_in}",
            h_i.len(),
            h_j.len()
        )));
    }
    for (name, a) in [("a_base", &head.a_base), ("a_order", &head.a_order), ("a_turn", &head.a_turn)] {
        if a.len() != 2 * f_out {
            return Err(GatError::Shape(format!("{name} has length {}, expected {}", a.len(), 2 * f_out)));
        }
    }
    let wi = head.w.dot(&ndarray::ArrayView1::from(h_i));
    let wj = head.w.dot(&ndarray::ArrayView1::from(h_j));
    let x: Vec<f64> = wi
        .iter()
        .chain(wj.iter())
        .map(|&v| if v > 0.0 { v } else { leaky_slope * v })
        .collect();
    let dot = |a: &Array1<f64>| a.iter().zip(&x).map(|(p, q)| p * q).sum::<f64>();
    Ok((dot(&head.a_base), dot(&head.a_order) * s_ij, dot(&head.a_turn) * t_ij))
}

/// Edge sets and node features in the form the layer consumes.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphInput {
    pub features: Matrix,
    pub orders: Vec<usize>,
    pub base_edges: Vec<Edge>,
    /// Multi-hot relation rows aligned with `base_edges`, when available.
    pub base_relations: Option<Matrix>,
    pub order_edges: Vec<Edge>,
    pub turn_edges: Vec<Edge>,
}

impl GraphInput {
    pub fn from_dialogue(g: &DialogueGraph) -> Self {
        let mut rel = Matrix::zeros((g.base_edges.len(), NUM_RELATIONS));
        for (r, e) in g.base_edges.iter().enumerate() {
            let hot = multi_hot(&g.edge_relations[e]);
            rel.row_mut(r).assign(&ndarray::ArrayView1::from(&hot));
        }
        Self {
            features: g.node_features.clone(),
            orders: g.orders.clone(),
            base_edges: g.base_edges.clone(),
            base_relations: Some(rel),
            order_edges: g.order_edges.clone(),
            turn_edges: g.turn_edges.clone(),
        }
    }

    /// Complete persona graph on the base channel.
    pub fn from_persona(p: &PersonaGraph) -> Self {
        Self {
            features: p.node_features.clone(),
            orders: (0..p.num_nodes()).collect(),
            base_edges: p.edges.clone(),
            base_relations: None,
            order_edges: Vec::new(),
            turn_edges: Vec::new(),
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.features.nrows()
    }

    fn check(&self) -> Result<(), GatError> {
        let n = self.num_nodes();
        if self.orders.len() != n {
            return Err(GatError::Shape(format!("{} orders for {n} nodes", self.orders.len())));
        }
        for &(i, j) in self.base_edges.iter().chain(&self.order_edges).chain(&self.turn_edges) {
            if i >= n || j >= n {
                return Err(GatError::Shape(format!("edge ({i},{j}) out of range for {n} nodes")));
            }
        }
        if let Some(r) = &self.base_relations {
            if r.dim() != (self.base_edges.len(), NUM_RELATIONS) {
                return Err(GatError::Shape("relation rows do not match base edges".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct HeadParams {
    pub w: ParamId,
    pub a_base: ParamId,
    pub a_order: Option<ParamId>,
    pub a_turn: Option<ParamId>,
    pub relations: Option<ParamId>,
}

/// Attention weights of one channel for one head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelTrace {
    pub channel: String,
    pub edges: Vec<Edge>,
    pub weights: Vec<f64>,
}

/// Per layer, per head, per channel attention weights.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AttentionTrace {
    pub layers: Vec<Vec<Vec<ChannelTrace>>>,
}

impl AttentionTrace {
    /// Sum of weights per destination node for each recorded channel.
    pub fn destination_sums(&self, layer: usize, head: usize) -> BTreeMap<(String, usize), f64> {
        let mut out = BTreeMap::new();
        for ch in &self.layers[layer][head] {
            for (&(_, j), &w) in ch.edges.iter().zip(&ch.weights) {
                *out.entry((ch.channel.clone(), j)).or_insert(0.0) += w;
            }
        }
        out
    }
}

/// Stacked DialogueGAT layers with parameters in a shared [`ParamStore`].
#[derive(Debug, Clone)]
pub struct DialogueGat {
    pub config: GatConfig,
    pub prefix: String,
    pub heads: Vec<Vec<HeadParams>>,
    pub lambda: Option<ParamId>,
}

struct Channel<'t> {
    name: &'static str,
    src: Vec<usize>,
    dst: Vec<usize>,
    scores: Var<'t>,
    messages: Var<'t>,
}

impl DialogueGat {
    /// Registers parameters as `{prefix}layer{L}.head{H}.{W,a_base,a_order,a_turn,rel}`.
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, config: GatConfig) -> Result<Self, GatError> {
        config.validate()?;
        let mut heads = Vec::with_capacity(config.num_layers);
        for layer in 0..config.num_layers {
            let (f_in, f_out) = config.layer_dims(layer);
            let mut layer_heads = Vec::with_capacity(config.num_heads);
            for head in 0..config.num_heads {
                let name = |p: &str| format!("{prefix}layer{layer}.head{head}.{p}");
                let w = store.add(name("W"), glorot(rng, f_out, f_in));
                let a_base = store.add(name("a_base"), glorot(rng, 2 * f_out, 1));
                let a_order = config
                    .order_channel
                    .then(|| store.add(name("a_order"), glorot(rng, 2 * f_out, 1)));
                let a_turn = config
                    .turn_channel
                    .then(|| store.add(name("a_turn"), glorot(rng, 2 * f_out, 1)));
                let relations = config
                    .use_relations
                    .then(|| store.add(name("rel"), glorot(rng, NUM_RELATIONS, f_out)));
                layer_heads.push(HeadParams {
                    w,
                    a_base,
                    a_order,
                    a_turn,
                    relations,
                });
            }
            heads.push(layer_heads);
        }
        let lambda = config.lambda_learnable.then(|| {
            store.add(
                format!("{prefix}lambda"),
                Matrix::from_elem((1, 1), config.lambda_decay),
            )
        });
        Ok(Self {
            config,
            prefix: prefix.to_string(),
            heads,
            lambda,
        })
    }

    /// Reads plain values of one head (absent channels are zero vectors).
    pub fn head_values(&self, store: &ParamStore, layer: usize, head: usize) -> HeadValues {
        let h = &self.heads[layer][head];
        let col = |id: ParamId| store.get(id).column(0).to_owned();
        let zeros = Array1::zeros(store.get(h.a_base).nrows());
        HeadValues {
            w: store.get(h.w).clone(),
            a_base: col(h.a_base),
            a_order: h.a_order.map(col).unwrap_or_else(|| zeros.clone()),
            a_turn: h.a_turn.map(col).unwrap_or(zeros),
        }
    }

    /// Current decay rate.
    pub fn lambda_value(&self, store: &ParamStore) -> f64 {
        self.lambda
            .map_or(self.config.lambda_decay, |id| store.get(id)[[0, 0]])
    }

    /// Keeps a learnable decay rate non-negative after an update.
    pub fn project(&self, store: &mut ParamStore) {
        if let Some(id) = self.lambda {
            let v = store.get_mut(id);
            v[[0, 0]] = v[[0, 0]].max(0.0);
        }
    }

    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        input: &GraphInput,
        with_trace: bool,
    ) -> Result<(Var<'t>, Option<AttentionTrace>), GatError> {
        input.check()?;
        if input.features.ncols() != self.config.in_dim {
            return Err(GatError::Shape(format!(
                "node features have width {}, encoder expects {}",
                input.features.ncols(),
                self.config.in_dim
            )));
        }
        let n = input.num_nodes();
        let mut trace = with_trace.then(AttentionTrace::default);
        let mut h = tape.constant(input.features.clone());

        let mut base_edges = input.base_edges.clone();
        let mut base_rel = input.base_relations.clone();
        if self.config.self_loops {
            base_edges.extend((0..n).map(|i| (i, i)));
            base_rel = base_rel.map(|r| {
                let pad = Matrix::zeros((n, NUM_RELATIONS));
                ndarray::concatenate(ndarray::Axis(0), &[r.view(), pad.view()]).expect("same width")
            });
        }
        let order_delta = Matrix::from_shape_fn((input.order_edges.len(), 1), |(e, _)| {
            let (i, j) = input.order_edges[e];
            -(input.orders[i].abs_diff(input.orders[j]) as f64)
        });
        let lambda = match self.lambda {
            Some(id) => tape.param(store, id),
            None => tape.constant(Matrix::from_elem((1, 1), self.config.lambda_decay)),
        };
        let s_ij = (!input.order_edges.is_empty()).then(|| tape.constant(order_delta).matmul(lambda).exp());

        for (layer, layer_heads) in self.heads.iter().enumerate() {
            let last = layer + 1 == self.config.num_layers;
            let mut outputs = Vec::with_capacity(layer_heads.len());
            let mut layer_trace = Vec::new();
            for hp in layer_heads {
                let (out, head_trace) = self.head_forward(tape, store, hp, h, n, &base_edges, base_rel.as_ref(), input, s_ij);
                outputs.push(out);
                layer_trace.push(head_trace);
            }
            let combined = if last {
                let mut acc = outputs[0];
                for o in &outputs[1..] {
                    acc = acc.add(*o);
                }
                acc.scale(1.0 / outputs.len() as f64)
            } else {
                Var::concat_cols(&outputs)
            };
            h = combined.elu();
            if let Some(t) = trace.as_mut() {
                t.layers.push(layer_trace);
            }
        }
        Ok((h, trace))
    }

    #[allow(clippy::too_many_arguments)]
    fn head_forward<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        hp: &HeadParams,
        h: Var<'t>,
        n: usize,
        base_edges: &[Edge],
        base_rel: Option<&Matrix>,
        input: &GraphInput,
        s_ij: Option<Var<'t>>,
    ) -> (Var<'t>, Vec<ChannelTrace>) {
        let slope = self.config.leaky_slope;
        let z = h.matmul(tape.param(store, hp.w).t());
        let mut channels: Vec<Channel<'t>> = Vec::new();

        let mut score = |name: &'static str, edges: &[Edge], a: ParamId, rel: Option<Var<'t>>, mult: Option<Var<'t>>| {
            if edges.is_empty() {
                return;
            }
            let src: Vec<usize> = edges.iter().map(|e| e.0).collect();
            let dst: Vec<usize> = edges.iter().map(|e| e.1).collect();
            let mut zs = z.gather_rows(&src);
            if let Some(r) = rel {
                zs = zs.add(r);
            }
            let zd = z.gather_rows(&dst);
            let x = Var::concat_cols(&[zs, zd]).leaky_relu(slope);
            let mut e = x.matmul(tape.param(store, a));
            if let Some(m) = mult {
                e = e.mul_col(m);
            }
            channels.push(Channel {
                name,
                src,
                dst,
                scores: e,
                messages: zs,
            });
        };

        let rel = match (hp.relations, base_rel) {
            (Some(table), Some(hot)) if !base_edges.is_empty() => {
                Some(tape.constant(hot.clone()).matmul(tape.param(store, table)))
            }
            _ => None,
        };
        score("base", base_edges, hp.a_base, rel, None);
        if let Some(a) = hp.a_order {
            score("order", &input.order_edges, a, None, s_ij);
        }
        if let Some(a) = hp.a_turn {
            // t_ij is 1 on every turn edge.
            score("turn", &input.turn_edges, a, None, None);
        }

        let mut reached = vec![0usize; n];
        let mut traces = Vec::new();
        let aggregated = match self.config.combine {
            CombineMode::Separate => {
                let mut parts = Vec::new();
                for ch in &channels {
                    let mut seen = vec![false; n];
                    for &j in &ch.dst {
                        seen[j] = true;
                    }
                    for (r, s) in reached.iter_mut().zip(seen) {
                        *r += usize::from(s);
                    }
                    let alpha = ch.scores.segment_softmax(&ch.dst);
                    traces.push(ChannelTrace {
                        channel: ch.name.to_string(),
                        edges: ch.src.iter().copied().zip(ch.dst.iter().copied()).collect(),
                        weights: alpha.value().column(0).to_vec(),
                    });
                    parts.push(ch.messages.mul_col(alpha).scatter_add_rows(&ch.dst, n));
                }
                let inv = Matrix::from_shape_fn((n, 1), |(j, _)| {
                    if reached[j] > 0 {
                        1.0 / reached[j] as f64
                    } else {
                        0.0
                    }
                });
                let mut acc: Option<Var<'t>> = None;
                for p in parts {
                    acc = Some(match acc {
                        Some(a) => a.add(p),
                        None => p,
                    });
                }
                acc.map(|a| a.mul_col(tape.constant(inv)))
            }
            CombineMode::Joint => {
                if channels.is_empty() {
                    None
                } else {
                    let scores = Var::concat_rows(&channels.iter().map(|c| c.scores).collect::<Vec<_>>());
                    let messages = Var::concat_rows(&channels.iter().map(|c| c.messages).collect::<Vec<_>>());
                    let dst: Vec<usize> = channels.iter().flat_map(|c| c.dst.iter().copied()).collect();
                    for &j in &dst {
                        reached[j] = 1;
                    }
                    let alpha = scores.segment_softmax(&dst);
                    traces.push(ChannelTrace {
                        channel: "joint".into(),
                        edges: channels
                            .iter()
                            .flat_map(|c| c.src.iter().copied().zip(c.dst.iter().copied()))
                            .collect(),
                        weights: alpha.value().column(0).to_vec(),
                    });
                    Some(messages.mul_col(alpha).scatter_add_rows(&dst, n))
                }
            }
        };
        let isolated = Matrix::from_shape_fn((n, 1), |(j, _)| if reached[j] == 0 { 1.0 } else { 0.0 });
        let passthrough = z.mul_col(tape.constant(isolated));
        let out = match aggregated {
            Some(a) => a.add(passthrough),
            None => passthrough,
        };
        (out, traces)
    }

    /// Evaluates without recording gradients, returning plain values.
    pub fn encode(&self, store: &ParamStore, input: &GraphInput) -> Result<Matrix, GatError> {
        let tape = Tape::new();
        Ok(self.forward(&tape, store, input, false)?.0.value())
    }
}
