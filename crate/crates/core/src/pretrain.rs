//! Self-supervised pre-training of the dialogue graph encoder with shortest
//! path prediction, turn classification and graph reconstruction.

use std::collections::{BTreeSet, VecDeque};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dialoguegat::{DialogueGat, GatConfig, GatError, GraphInput};
use crate::graphbuild::DialogueGraph;
use crate::nn::checkpoint::{self, CheckpointError};
use crate::nn::{batch_gradients, glorot, Adam, Linear, Matrix, Mlp, ParamId, ParamStore, Tape, Var};

#[derive(Debug, Error)]
pub enum PretrainError {
    #[error("graph {graph}: {reason}")]
    Sampling { graph: String, reason: String },
    #[error("non-finite {task} loss")]
    NonFinite { task: &'static str },
    #[error("training diverged at epoch {epoch}; last good checkpoint kept at {checkpoint:?}")]
    Diverged { epoch: usize, checkpoint: Option<PathBuf> },
    #[error("invalid pre-training configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Gat(#[from] GatError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SppPair {
    pub i: usize,
    pub j: usize,
    pub length: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TcPair {
    pub i: usize,
    pub j: usize,
    pub same_speaker: bool,
}

/// Targets of the three tasks for one graph.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainBatch {
    pub spp_pairs: Vec<SppPair>,
    pub tc_pairs: Vec<TcPair>,
    /// `gr_targets[i] = i + 1` for every non-final node.
    pub gr_targets: Vec<usize>,
}

/// Adjacency lists of the undirected union of base, order and turn edges.
pub fn union_adjacency(graph: &DialogueGraph) -> Vec<BTreeSet<usize>> {
    let mut adj = vec![BTreeSet::new(); graph.num_nodes()];
    for &(i, j) in graph.base_edges.iter().chain(&graph.order_edges).chain(&graph.turn_edges) {
        if i != j {
            adj[i].insert(j);
            adj[j].insert(i);
        }
    }
    adj
}

/// Hop counts from `source`; unreachable nodes are `None`.
pub fn bfs_distances(adj: &[BTreeSet<usize>], source: usize) -> Vec<Option<usize>> {
    let mut dist = vec![None; adj.len()];
    dist[source] = Some(0);
    let mut queue = VecDeque::from([source]);
    while let Some(u) = queue.pop_front() {
        let du = dist[u].expect("queued nodes have a distance");
        for &v in &adj[u] {
            if dist[v].is_none() {
                dist[v] = Some(du + 1);
                queue.push_back(v);
            }
        }
    }
    dist
}

/// Samples up to `num_pairs` distinct unordered node pairs uniformly from the
/// connected ones and labels them with their hop count.
pub fn shortest_path_targets(graph: &DialogueGraph, num_pairs: usize, seed: u64) -> Result<Vec<SppPair>, PretrainError> {
    let adj = union_adjacency(graph);
    let mut candidates = Vec::new();
    for i in 0..adj.len() {
        let dist = bfs_distances(&adj, i);
        for (j, d) in dist.iter().enumerate().skip(i + 1) {
            if let Some(length) = *d {
                candidates.push(SppPair { i, j, length });
            }
        }
    }
    if candidates.is_empty() {
        return Err(PretrainError::Sampling {
            graph: graph.dialogue_id.clone(),
            reason: "no connected pair of distinct nodes".into(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let take = num_pairs.min(candidates.len());
    let mut picked: Vec<SppPair> = rand::seq::index::sample(&mut rng, candidates.len(), take)
        .into_iter()
        .map(|k| candidates[k])
        .collect();
    picked.sort_by_key(|p| (p.i, p.j));
    Ok(picked)
}

/// Pairs of utterances one and two positions apart with their same-speaker
/// flag. With strict alternation the first kind is always "different" and
/// the second always "same", so both are needed for a non-trivial task.
pub fn turn_pairs(graph: &DialogueGraph) -> Vec<TcPair> {
    let n = graph.num_nodes();
    let mut out = Vec::new();
    for gap in [1, 2] {
        for i in 0..n.saturating_sub(gap) {
            out.push(TcPair {
                i,
                j: i + gap,
                same_speaker: graph.speakers[i] == graph.speakers[i + gap],
            });
        }
    }
    out
}

pub fn build_batch(graph: &DialogueGraph, num_pairs: usize, seed: u64) -> Result<PretrainBatch, PretrainError> {
    let n = graph.num_nodes();
    Ok(PretrainBatch {
        spp_pairs: shortest_path_targets(graph, num_pairs, seed)?,
        tc_pairs: turn_pairs(graph),
        gr_targets: (1..n).collect(),
    })
}

/// Task heads on top of node embeddings of width `dim`.
#[derive(Debug, Clone)]
pub struct PretrainHeads {
    pub spp: Mlp,
    pub tc: Linear,
    /// Projection used for successor scoring, `[dim x dim]`.
    pub gr: ParamId,
}

impl PretrainHeads {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, dim: usize, hidden: usize) -> Self {
        Self {
            spp: Mlp::new(store, rng, "heads.spp", 2 * dim, hidden, 1),
            tc: Linear::new(store, rng, "heads.tc", 2 * dim, 2, true),
            gr: store.add("heads.gr", glorot(rng, dim, dim)),
        }
    }
}

/// The three task losses and their sum, as tape values.
#[derive(Debug, Clone, Copy)]
pub struct TaskLosses<'t> {
    pub spp: Var<'t>,
    pub tc: Var<'t>,
    pub gr: Var<'t>,
    pub da: Var<'t>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub spp: f64,
    pub tc: f64,
    pub gr: f64,
    pub da: f64,
}

impl TaskLosses<'_> {
    pub fn values(&self) -> LossValues {
        LossValues {
            spp: self.spp.item(),
            tc: self.tc.item(),
            gr: self.gr.item(),
            da: self.da.item(),
        }
    }
}

fn pair_features<'t>(h: Var<'t>, pairs: impl Iterator<Item = (usize, usize)>) -> Var<'t> {
    let (src, dst): (Vec<usize>, Vec<usize>) = pairs.unzip();
    Var::concat_cols(&[h.gather_rows(&src), h.gather_rows(&dst)])
}

pub fn task_losses<'t>(
    tape: &'t Tape,
    store: &ParamStore,
    heads: &PretrainHeads,
    h: Var<'t>,
    batch: &PretrainBatch,
) -> TaskLosses<'t> {
    let spp = if batch.spp_pairs.is_empty() {
        tape.scalar(0.0)
    } else {
        let x = pair_features(h, batch.spp_pairs.iter().map(|p| (p.i, p.j)));
        let target = Matrix::from_shape_fn((batch.spp_pairs.len(), 1), |(r, _)| batch.spp_pairs[r].length as f64);
        let diff = heads.spp.forward(tape, store, x).sub(tape.constant(target));
        diff.mul(diff).mean()
    };
    let tc = if batch.tc_pairs.is_empty() {
        tape.scalar(0.0)
    } else {
        let x = pair_features(h, batch.tc_pairs.iter().map(|p| (p.i, p.j)));
        let labels: Vec<usize> = batch.tc_pairs.iter().map(|p| usize::from(p.same_speaker)).collect();
        heads.tc.forward(tape, store, x).row_nll(&labels).mean()
    };
    let gr = if batch.gr_targets.is_empty() {
        tape.scalar(0.0)
    } else {
        let rows: Vec<usize> = (0..batch.gr_targets.len()).collect();
        let query = h.gather_rows(&rows).matmul(tape.param(store, heads.gr));
        query.matmul(h.t()).row_nll(&batch.gr_targets).mean()
    };
    TaskLosses {
        spp,
        tc,
        gr,
        da: spp.add(tc).add(gr),
    }
}

/// Loss values for fixed node embeddings.
pub fn pretrain_losses(
    store: &ParamStore,
    heads: &PretrainHeads,
    embeddings: &Matrix,
    batch: &PretrainBatch,
) -> Result<LossValues, PretrainError> {
    let tape = Tape::new();
    let h = tape.constant(embeddings.clone());
    let v = task_losses(&tape, store, heads, h, batch).values();
    check_finite(&v)?;
    Ok(v)
}

fn check_finite(v: &LossValues) -> Result<(), PretrainError> {
    for (task, x) in [("shortest-path", v.spp), ("turn-classification", v.tc), ("graph-reconstruction", v.gr)] {
        if !x.is_finite() {
            return Err(PretrainError::NonFinite { task });
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub pairs_per_graph: usize,
    pub head_hidden: usize,
    /// Fraction of graphs (taken from the end) held out for evaluation.
    pub heldout_fraction: f64,
    pub clip_norm: f64,
    /// Keep the parameters of the epoch with the lowest held-out loss.
    pub keep_best: bool,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            lr: 1e-3,
            batch_size: 4,
            pairs_per_graph: 8,
            head_hidden: 32,
            heldout_fraction: 0.2,
            clip_norm: 5.0,
            keep_best: true,
            seed: 42,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<(), PretrainError> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(PretrainError::Config("lr must be positive".into()));
        }
        if self.batch_size == 0 || self.pairs_per_graph == 0 || self.head_hidden == 0 {
            return Err(PretrainError::Config("batch_size, pairs_per_graph and head_hidden must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.heldout_fraction) {
            return Err(PretrainError::Config("heldout_fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Encoder plus task heads sharing one parameter store.
#[derive(Debug, Clone)]
pub struct PretrainModel {
    pub encoder: DialogueGat,
    pub heads: PretrainHeads,
}

impl PretrainModel {
    pub fn new(store: &mut ParamStore, gat: GatConfig, head_hidden: usize, seed: u64) -> Result<Self, PretrainError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = DialogueGat::new(store, &mut rng, "encoder.", gat)?;
        let heads = PretrainHeads::new(store, &mut rng, encoder.config.out_dim, head_hidden);
        Ok(Self { encoder, heads })
    }

    pub fn losses<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        input: &GraphInput,
        batch: &PretrainBatch,
    ) -> Result<TaskLosses<'t>, PretrainError> {
        let (h, _) = self.encoder.forward(tape, store, input, false)?;
        Ok(task_losses(tape, store, &self.heads, h, batch))
    }

    /// Mean task losses over a set of graphs.
    pub fn evaluate(&self, store: &ParamStore, items: &[(GraphInput, PretrainBatch)]) -> Result<LossValues, PretrainError> {
        let mut acc = LossValues {
            spp: 0.0,
            tc: 0.0,
            gr: 0.0,
            da: 0.0,
        };
        for (input, batch) in items {
            let tape = Tape::new();
            let v = self.losses(&tape, store, input, batch)?.values();
            check_finite(&v)?;
            acc.spp += v.spp;
            acc.tc += v.tc;
            acc.gr += v.gr;
            acc.da += v.da;
        }
        let n = items.len().max(1) as f64;
        Ok(LossValues {
            spp: acc.spp / n,
            tc: acc.tc / n,
            gr: acc.gr / n,
            da: acc.da / n,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub losses: LossValues,
    pub heldout_da: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub store: ParamStore,
    pub model: PretrainModel,
    /// Epoch 0 is the evaluation before any update.
    pub log: Vec<EpochLog>,
    pub heldout_initial: Option<LossValues>,
    /// Held-out losses of the returned parameters.
    pub heldout_final: Option<LossValues>,
    /// Epoch whose parameters are returned.
    pub selected_epoch: usize,
}

pub const PRETRAIN_STAGE: &str = "pretrain";

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PretrainError + '_ {
    move |source| PretrainError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn write_loss_csv(path: &Path, log: &[EpochLog]) -> Result<(), PretrainError> {
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    let mut text = String::from("epoch,l_spp,l_tc,l_gr,l_da,heldout_l_da\n");
    for e in log {
        let l = &e.losses;
        let held = e.heldout_da.map(|v| v.to_string()).unwrap_or_default();
        text.push_str(&format!("{},{},{},{},{},{held}\n", e.epoch, l.spp, l.tc, l.gr, l.da));
    }
    f.write_all(text.as_bytes()).map_err(io_err(path))
}

fn save_checkpoint(
    out: &Path,
    config_hash: &str,
    store: &ParamStore,
    gat: &GatConfig,
    cfg: &PretrainConfig,
    extra: serde_json::Value,
) -> Result<(), PretrainError> {
    let meta = serde_json::json!({ "gat": gat, "pretrain": cfg, "summary": extra });
    checkpoint::save(out, PRETRAIN_STAGE, config_hash, meta, store)?;
    Ok(())
}

/// Trains encoder and heads on `graphs`, holding out the trailing
/// `heldout_fraction`. When `out` is given, writes `losses.csv` and a
/// checkpoint there; on divergence the checkpoint holds the last finite
/// parameters.
pub fn run_pretraining(
    cfg: &PretrainConfig,
    gat: &GatConfig,
    graphs: &[DialogueGraph],
    out: Option<&Path>,
    config_hash: &str,
) -> Result<PretrainOutcome, PretrainError> {
    cfg.validate()?;
    if graphs.is_empty() {
        return Err(PretrainError::Config("no graphs to pre-train on".into()));
    }
    let mut store = ParamStore::new();
    let model = PretrainModel::new(&mut store, gat.clone(), cfg.head_hidden, cfg.seed)?;

    let items: Vec<(GraphInput, PretrainBatch)> = graphs
        .iter()
        .enumerate()
        .map(|(k, g)| {
            let seed = cfg.seed.wrapping_add(1 + k as u64);
            Ok((GraphInput::from_dialogue(g), build_batch(g, cfg.pairs_per_graph, seed)?))
        })
        .collect::<Result<_, PretrainError>>()?;
    let heldout = ((graphs.len() as f64) * cfg.heldout_fraction).floor() as usize;
    let heldout = heldout.min(graphs.len() - 1);
    let (train, held) = items.split_at(items.len() - heldout);

    let mut adam = Adam::new(cfg.lr).with_clip(cfg.clip_norm);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5052_4554);
    let heldout_initial = (!held.is_empty()).then(|| model.evaluate(&store, held)).transpose()?;
    let mut log = vec![EpochLog {
        epoch: 0,
        losses: model.evaluate(&store, train)?,
        heldout_da: heldout_initial.map(|v| v.da),
    }];
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }

    let mut best: Option<(f64, usize, ParamStore)> = match (cfg.keep_best, heldout_initial) {
        (true, Some(h)) => Some((h.da, 0, store.clone())),
        _ => None,
    };
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&(GraphInput, PretrainBatch)> = chunk.iter().map(|&k| &train[k]).collect();
            let (total, mut grads, count) = batch_gradients(&store, &batch, |tape, store, item| {
                model.losses(tape, store, &item.0, &item.1).ok().map(|l| l.da)
            });
            if !total.is_finite() || !grads.all_finite() {
                return Err(abort(out, config_hash, &store, gat, cfg, epoch));
            }
            grads.scale(1.0 / count.max(1) as f64);
            adam.step(&mut store, &grads);
            model.encoder.project(&mut store);
        }
        let losses = match model.evaluate(&store, train) {
            Ok(l) if l.da.is_finite() => l,
            _ => return Err(abort(out, config_hash, &store, gat, cfg, epoch)),
        };
        let heldout_da = (!held.is_empty()).then(|| model.evaluate(&store, held)).transpose()?.map(|v| v.da);
        log::debug!("pretrain epoch {epoch}: l_da {:.5}", losses.da);
        log.push(EpochLog {
            epoch,
            losses,
            heldout_da,
        });
        if let (Some(b), Some(h)) = (best.as_mut(), heldout_da) {
            if h < b.0 {
                *b = (h, epoch, store.clone());
            }
        }
    }
    let mut selected_epoch = cfg.epochs;
    if let Some((_, epoch, params)) = best {
        store = params;
        selected_epoch = epoch;
    }
    let heldout_final = (!held.is_empty()).then(|| model.evaluate(&store, held)).transpose()?;
    if let (Some(a), Some(b)) = (heldout_initial, heldout_final) {
        if b.da >= a.da && cfg.epochs > 0 {
            log::warn!("held-out l_da did not improve: {:.5} -> {:.5}", a.da, b.da);
        }
    }

    if let Some(dir) = out {
        write_loss_csv(&dir.join("losses.csv"), &log)?;
        let extra = serde_json::json!({
            "train_graphs": train.len(),
            "heldout_graphs": held.len(),
            "heldout_initial_l_da": heldout_initial.map(|v| v.da),
            "heldout_final_l_da": heldout_final.map(|v| v.da),
            "selected_epoch": selected_epoch,
        });
        save_checkpoint(dir, config_hash, &store, gat, cfg, extra)?;
    }
    Ok(PretrainOutcome {
        store,
        model,
        log,
        heldout_initial,
        heldout_final,
        selected_epoch,
    })
}

fn abort(
    out: Option<&Path>,
    config_hash: &str,
    store: &ParamStore,
    gat: &GatConfig,
    cfg: &PretrainConfig,
    epoch: usize,
) -> PretrainError {
    // The store still holds the parameters from before the failing step.
    let checkpoint = out.and_then(|dir| {
        save_checkpoint(dir, config_hash, store, gat, cfg, serde_json::json!({ "diverged_at": epoch }))
            .ok()
            .map(|_| dir.to_path_buf())
    });
    PretrainError::Diverged { epoch, checkpoint }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Speaker;
    use std::collections::BTreeMap;

    fn graph(n: usize, base: Vec<(usize, usize)>, order: Vec<(usize, usize)>) -> DialogueGraph {
        DialogueGraph {
            dialogue_id: "g".into(),
            node_features: Matrix::zeros((n, 3)),
            edge_relations: base.iter().map(|&e| (e, vec![crate::corpus::RelationLabel::Comment])).collect::<BTreeMap<_, _>>(),
            base_edges: base,
            order_edges: order,
            turn_edges: vec![],
            orders: (0..n).collect(),
            turns: (0..n).map(|i| i / 2).collect(),
            speakers: (0..n)
                .map(|i| if i % 2 == 0 { Speaker::User } else { Speaker::Bot })
                .collect(),
            d: 3,
        }
    }

    #[test]
    fn path_graph_distances() {
        let g = graph(4, vec![(0, 1), (1, 2), (2, 3)], vec![]);
        let pairs = shortest_path_targets(&g, 100, 0).unwrap();
        assert_eq!(pairs.len(), 6);
        let p = pairs.iter().find(|p| (p.i, p.j) == (0, 3)).unwrap();
        assert_eq!(p.length, 3);
        assert!(pairs.iter().all(|p| p.i != p.j));
    }

    #[test]
    fn order_edges_shorten_paths() {
        let g = graph(4, vec![], vec![(0, 1), (0, 2), (1, 2), (1, 3), (2, 3)]);
        let pairs = shortest_path_targets(&g, 100, 0).unwrap();
        assert_eq!(pairs.iter().find(|p| (p.i, p.j) == (0, 3)).unwrap().length, 2);
    }

    #[test]
    fn disconnected_graph_is_an_error() {
        assert!(shortest_path_targets(&graph(3, vec![], vec![]), 4, 0).is_err());
    }

    #[test]
    fn turn_pairs_follow_speakers() {
        let g = graph(5, vec![], vec![]);
        for p in turn_pairs(&g) {
            assert_eq!(p.same_speaker, g.speakers[p.i] == g.speakers[p.j]);
        }
    }

    #[test]
    fn zero_heads_give_uniform_successor_loss() {
        let mut store = ParamStore::new();
        let heads = PretrainHeads::new(&mut store, &mut ChaCha8Rng::seed_from_u64(0), 3, 4);
        store.get_mut(heads.gr).fill(0.0);
        let g = graph(4, vec![(0, 1), (1, 2), (2, 3)], vec![]);
        let batch = build_batch(&g, 4, 0).unwrap();
        let h = Matrix::from_shape_fn((4, 3), |(i, j)| (i * 3 + j) as f64 * 0.1);
        let v = pretrain_losses(&store, &heads, &h, &batch).unwrap();
        assert!((v.gr - 4f64.ln()).abs() < 1e-12);
        assert!((v.da - (v.spp + v.tc + v.gr)).abs() < 1e-12);
    }
}
