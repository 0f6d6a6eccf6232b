//! Acceptance suite. Prints one PASS/FAIL/SKIP line per criterion and exits
//! non-zero when any criterion fails.
//!
//! Tolerances are pinned here:
//! * graph-attention oracle: 1e-10 absolute, attention sums 1 +- 1e-9;
//! * gradient checks: eps 1e-5, relative error `|a - n| / max(|a|, |n|, 1e-5)`
//!   below 1e-4;
//! * loss identities 1e-12, token NLL oracle 1e-10;
//! * metric oracles 1e-12.

#![allow(clippy::type_complexity, clippy::needless_range_loop, clippy::field_reassign_with_default)]

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use mudi_core::coherence::{
    class_balanced_weights, dcu_loss, label_counts, CoherenceConfig, CoherenceModel, DcuWeights, Fusion, FusionMode,
    PairInput,
};
use mudi_core::corpus::{
    annotate_all, fixture_corpus, multi_hot, Dialogue, HeuristicAnnotator, RelationLabel, NUM_RELATIONS,
};
use mudi_core::corpus::convai2::{load_convai2, CONVAI2_TRAIN_ENV};
use mudi_core::dialoguegat::{CombineMode, DialogueGat, GatConfig, GraphInput};
use mudi_core::generator::{
    build_encoder_input, build_prompt, dynamic_weighted_aggregation, mean_token_loss, DecoderInput, DwaParams,
    GeneratorConfig, GeneratorModel, TrainingExample, Variant, Vocabulary,
};
use mudi_core::graphbuild::{build_dialogue_graph, build_pair, order_edges, turn_edges, GraphPair, HashingEmbedder};
use mudi_core::metrics::{bleu1, distinct_n, entropy_n, evaluate, rouge1, usr, EvalInput, Metric};
use mudi_core::nn::checkpoint;
use mudi_core::nn::{uniform, Matrix, ParamId, ParamStore, Tape, Var};
use mudi_core::pipeline::{read_jsonl, EvalRecord, Pipeline, RunConfig, Stage};
use mudi_core::pretrain::{build_batch, run_pretraining, PretrainBatch, PretrainModel};
use mudi_core::text::tokenize;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

enum Verdict {
    Pass(String),
    Fail(String),
    Skip(String),
}

type Check = fn(&mut Shared) -> Verdict;

/// Artifacts shared between the end-to-end criteria.
#[derive(Default)]
struct Shared {
    scratch: Option<tempfile::TempDir>,
    main_run: Option<RunConfig>,
}

impl Shared {
    fn dir(&mut self, name: &str) -> PathBuf {
        let root = self.scratch.get_or_insert_with(|| tempfile::tempdir().expect("temp dir"));
        root.path().join(name)
    }
}

fn verdict(ok: bool, detail: String) -> Verdict {
    if ok {
        Verdict::Pass(detail)
    } else {
        Verdict::Fail(detail)
    }
}

fn main() {
    // `cargo test -- --list` and similar harness probes.
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let criteria: [(u32, &str, Check); 12] = [
        (1, "ConvAI2 corpus statistics", c1_convai2),
        (2, "edge construction oracle", c2_edges),
        (3, "graph attention numerical oracle", c3_gat_oracle),
        (4, "gradient checks", c4_gradients),
        (5, "loss identities and token NLL oracle", c5_losses),
        (6, "pre-training descent and shortest-path targets", c6_pretrain),
        (7, "generator memorization", c7_memorization),
        (8, "aggregation boundary behaviour", c8_dwa),
        (9, "variant collapse", c9_collapse),
        (10, "metric oracles", c10_metrics),
        (11, "end-to-end determinism", c11_determinism),
        (12, "ablation directionality", c12_ablation),
    ];
    let mut shared = Shared::default();
    let mut failed = 0;
    for (id, name, check) in criteria {
        let start = Instant::now();
        let v = panic::catch_unwind(AssertUnwindSafe(|| check(&mut shared)))
            .unwrap_or_else(|e| {
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                Verdict::Fail(format!("panicked: {msg}"))
            });
        let secs = start.elapsed().as_secs_f64();
        let (tag, detail) = match v {
            Verdict::Pass(d) => ("PASS", d),
            Verdict::Fail(d) => {
                failed += 1;
                ("FAIL", d)
            }
            Verdict::Skip(d) => ("SKIP", d),
        };
        println!("{tag} [{id:>2}] {name}: {detail} ({secs:.1}s)");
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------- fixtures

fn annotated_fixture() -> Vec<Dialogue> {
    annotate_all(&fixture_corpus(), &HeuristicAnnotator)
}

fn fixture_pairs(dim: usize) -> Vec<GraphPair> {
    let emb = HashingEmbedder::new(dim, 42);
    annotated_fixture().iter().map(|d| build_pair(d, &emb, 3, dim).unwrap()).collect()
}

fn max_abs_diff(a: &Matrix, b: &Matrix) -> f64 {
    assert_eq!(a.dim(), b.dim());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

// ---------------------------------------------------------------- 1

fn c1_convai2(_: &mut Shared) -> Verdict {
    let Some(path) = std::env::var_os(CONVAI2_TRAIN_ENV) else {
        return Verdict::Skip(format!("{CONVAI2_TRAIN_ENV} not set"));
    };
    let (dialogues, stats) = match load_convai2(Path::new(&path), None) {
        Ok(x) => x,
        Err(e) => return Verdict::Fail(e.to_string()),
    };
    let utterances: usize = dialogues.iter().map(Dialogue::len).sum();
    verdict(
        dialogues.len() == 17_878 && utterances == 131_438 && stats.exchanges * 2 == utterances,
        format!("{} dialogues, {utterances} utterances (expected 17878 / 131438)", dialogues.len()),
    )
}

// ---------------------------------------------------------------- 2

fn brute_order_edges(orders: &[usize], d: usize) -> BTreeSet<(usize, usize)> {
    let mut out = BTreeSet::new();
    for i in 0..orders.len() {
        for j in 0..orders.len() {
            let diff = orders[j] as i64 - orders[i] as i64;
            if diff > 0 && diff < d as i64 {
                out.insert((i, j));
            }
        }
    }
    out
}

fn brute_turn_edges(turns: &[usize]) -> BTreeSet<(usize, usize)> {
    let mut out = BTreeSet::new();
    for i in 0..turns.len() {
        for j in 0..turns.len() {
            if i != j && turns[i] == turns[j] {
                out.insert((i, j));
            }
        }
    }
    out
}

fn c2_edges(_: &mut Shared) -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let emb = HashingEmbedder::new(8, 1);
    let words = ["hi", "do", "you", "like", "dogs", "yes", "i", "have", "two", "cool", "?", "."];
    for case in 0..200 {
        let n = rng.gen_range(1..=12);
        let d = rng.gen_range(1..=5);
        // Arbitrary distinct orders and turn ids.
        let mut orders: Vec<usize> = (0..20).collect();
        orders.shuffle(&mut rng);
        orders.truncate(n);
        let turns: Vec<usize> = (0..n).map(|_| rng.gen_range(0..=n / 2)).collect();
        let got_o: BTreeSet<_> = order_edges(&orders, d).unwrap().into_iter().collect();
        let got_t: BTreeSet<_> = turn_edges(&turns).into_iter().collect();
        if got_o != brute_order_edges(&orders, d) || got_t != brute_turn_edges(&turns) {
            return Verdict::Fail(format!("case {case}: n={n} d={d} mismatch"));
        }
        // The same sets through the graph builder, where orders are
        // positions and turns pair up consecutive utterances.
        if n >= 2 {
            let texts: Vec<String> = (0..n)
                .map(|_| (0..rng.gen_range(1..5)).map(|_| *words.choose(&mut rng).unwrap()).collect::<Vec<_>>().join(" "))
                .collect();
            let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
            let dl = Dialogue::from_texts(format!("c{case}"), vec!["i am a test.".into()], &refs).unwrap();
            let dl = annotate_all(&[dl], &HeuristicAnnotator).remove(0);
            let g = build_dialogue_graph(&dl, &emb, d, 8).unwrap();
            let positions: Vec<usize> = (0..n).collect();
            let pairs: Vec<usize> = (0..n).map(|i| i / 2).collect();
            let go: BTreeSet<_> = g.order_edges.iter().copied().collect();
            let gt: BTreeSet<_> = g.turn_edges.iter().copied().collect();
            if go != brute_order_edges(&positions, d) || gt != brute_turn_edges(&pairs) {
                return Verdict::Fail(format!("graph case {case}: n={n} d={d} mismatch"));
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(secs < 5.0, format!("200 cases match brute force in {secs:.3}s (limit 5s)"))
}

// ---------------------------------------------------------------- 3

/// Plain-loop reimplementation of one stack of graph-attention layers.
struct OracleGraph {
    features: Vec<Vec<f64>>,
    orders: Vec<usize>,
    base: Vec<(usize, usize)>,
    base_rel: Vec<[f64; NUM_RELATIONS]>,
    order: Vec<(usize, usize)>,
    turn: Vec<(usize, usize)>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

fn oracle_forward(gat: &DialogueGat, store: &ParamStore, g: &OracleGraph) -> Vec<Vec<f64>> {
    let cfg = &gat.config;
    let n = g.features.len();
    let lambda = gat.lambda_value(store);
    let slope = cfg.leaky_slope;
    let leaky = |x: f64| if x > 0.0 { x } else { slope * x };
    let mut base = g.base.clone();
    let mut base_rel = g.base_rel.clone();
    if cfg.self_loops {
        for i in 0..n {
            base.push((i, i));
            base_rel.push([0.0; NUM_RELATIONS]);
        }
    }
    let mut h = g.features.clone();
    for layer in 0..cfg.num_layers {
        let last = layer + 1 == cfg.num_layers;
        let mut head_outs: Vec<Vec<Vec<f64>>> = Vec::new();
        for (head, hp) in gat.heads[layer].iter().enumerate() {
            let vals = gat.head_values(store, layer, head);
            let (f_out, _) = vals.w.dim();
            let z: Vec<Vec<f64>> = h
                .iter()
                .map(|hi| (0..f_out).map(|r| dot(vals.w.row(r).as_slice().unwrap(), hi)).collect())
                .collect();
            let rel_table = hp.relations.map(|id| store.get(id).clone());
            // (src, dst, score, message) per channel.
            let mut channels: Vec<Vec<(usize, usize, f64, Vec<f64>)>> = Vec::new();
            let score = |a: &[f64], zs: &[f64], zd: &[f64]| -> f64 {
                let x: Vec<f64> = zs.iter().chain(zd).map(|&v| leaky(v)).collect();
                dot(a, &x)
            };
            let a_base = vals.a_base.to_vec();
            let mut ch = Vec::new();
            for (k, &(i, j)) in base.iter().enumerate() {
                let mut zs = z[i].clone();
                if let Some(t) = &rel_table {
                    for (c, zc) in zs.iter_mut().enumerate() {
                        for r in 0..NUM_RELATIONS {
                            *zc += base_rel[k][r] * t[[r, c]];
                        }
                    }
                }
                ch.push((i, j, score(&a_base, &zs, &z[j]), zs));
            }
            channels.push(ch);
            if hp.a_order.is_some() {
                let a = vals.a_order.to_vec();
                channels.push(
                    g.order
                        .iter()
                        .map(|&(i, j)| {
                            let s = (-lambda * (g.orders[i] as f64 - g.orders[j] as f64).abs()).exp();
                            (i, j, score(&a, &z[i], &z[j]) * s, z[i].clone())
                        })
                        .collect(),
                );
            }
            if hp.a_turn.is_some() {
                let a = vals.a_turn.to_vec();
                channels.push(g.turn.iter().map(|&(i, j)| (i, j, score(&a, &z[i], &z[j]), z[i].clone())).collect());
            }
            let mut out = vec![vec![0.0; f_out]; n];
            for j in 0..n {
                let groups: Vec<Vec<&(usize, usize, f64, Vec<f64>)>> = match cfg.combine {
                    CombineMode::Separate => channels
                        .iter()
                        .map(|c| c.iter().filter(|e| e.1 == j).collect::<Vec<_>>())
                        .filter(|c| !c.is_empty())
                        .collect(),
                    CombineMode::Joint => {
                        let all: Vec<_> = channels.iter().flatten().filter(|e| e.1 == j).collect();
                        if all.is_empty() {
                            vec![]
                        } else {
                            vec![all]
                        }
                    }
                };
                if groups.is_empty() {
                    out[j] = z[j].clone();
                    continue;
                }
                for grp in &groups {
                    let w = softmax(&grp.iter().map(|e| e.2).collect::<Vec<_>>());
                    for (e, a) in grp.iter().zip(w) {
                        for c in 0..f_out {
                            out[j][c] += a * e.3[c] / groups.len() as f64;
                        }
                    }
                }
            }
            head_outs.push(out);
        }
        let heads = head_outs.len() as f64;
        h = (0..n)
            .map(|i| {
                let row: Vec<f64> = if last {
                    let w = head_outs[0][i].len();
                    (0..w).map(|c| head_outs.iter().map(|o| o[i][c]).sum::<f64>() / heads).collect()
                } else {
                    head_outs.iter().flat_map(|o| o[i].clone()).collect()
                };
                row.into_iter().map(|x| if x > 0.0 { x } else { x.exp_m1() }).collect()
            })
            .collect();
    }
    h
}

fn random_graph(rng: &mut ChaCha8Rng, n: usize, in_dim: usize) -> (GraphInput, OracleGraph) {
    let features = uniform(rng, n, in_dim, 1.0);
    let orders: Vec<usize> = (0..n).collect();
    let keep = |rng: &mut ChaCha8Rng| rng.gen_bool(0.8);
    let base: Vec<(usize, usize)> = (0..n.saturating_sub(1)).map(|i| (i, i + 1)).filter(|_| keep(rng)).collect();
    let base_rel: Vec<[f64; NUM_RELATIONS]> = base
        .iter()
        .map(|_| {
            let labels: Vec<RelationLabel> = (0..rng.gen_range(1..=3))
                .map(|_| RelationLabel::from_index(rng.gen_range(0..NUM_RELATIONS)).unwrap())
                .collect();
            multi_hot(&labels)
        })
        .collect();
    let d = rng.gen_range(1..=4);
    let order: Vec<_> = order_edges(&orders, d).unwrap().into_iter().filter(|_| keep(rng)).collect();
    let turns: Vec<usize> = (0..n).map(|i| i / 2).collect();
    let turn: Vec<_> = turn_edges(&turns).into_iter().filter(|_| keep(rng)).collect();
    let mut rel = Matrix::zeros((base.len(), NUM_RELATIONS));
    for (r, row) in base_rel.iter().enumerate() {
        for c in 0..NUM_RELATIONS {
            rel[[r, c]] = row[c];
        }
    }
    let input = GraphInput {
        features: features.clone(),
        orders: orders.clone(),
        base_edges: base.clone(),
        base_relations: Some(rel),
        order_edges: order.clone(),
        turn_edges: turn.clone(),
    };
    let oracle = OracleGraph {
        features: features.outer_iter().map(|r| r.to_vec()).collect(),
        orders,
        base,
        base_rel,
        order,
        turn,
    };
    (input, oracle)
}

fn c3_gat_oracle(_: &mut Shared) -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut worst, mut worst_sum) = (0.0f64, 0.0f64);
    for case in 0..50 {
        let n = rng.gen_range(1..=9);
        let cfg = GatConfig {
            in_dim: 5,
            hidden_dim: 3,
            out_dim: 4,
            num_layers: 2,
            num_heads: 2,
            lambda_decay: rng.gen_range(0.0..1.5),
            use_relations: case % 3 != 0,
            self_loops: case % 5 == 0,
            combine: if case % 4 == 3 { CombineMode::Joint } else { CombineMode::Separate },
            ..GatConfig::default()
        };
        let mut store = ParamStore::new();
        let gat = DialogueGat::new(&mut store, &mut ChaCha8Rng::seed_from_u64(case), "g.", cfg).unwrap();
        let (input, oracle) = random_graph(&mut rng, n, 5);
        let tape = Tape::new();
        let (out, trace) = gat.forward(&tape, &store, &input, true).unwrap();
        let expected = oracle_forward(&gat, &store, &oracle);
        let expected = Matrix::from_shape_fn(out.shape(), |(i, c)| expected[i][c]);
        worst = worst.max(max_abs_diff(&out.value(), &expected));
        let trace = trace.unwrap();
        for layer in 0..2 {
            for head in 0..2 {
                for ch in &trace.layers[layer][head] {
                    if ch.weights.iter().any(|&w| w < 0.0) {
                        return Verdict::Fail(format!("case {case}: negative attention weight"));
                    }
                }
                for (_, s) in trace.destination_sums(layer, head) {
                    worst_sum = worst_sum.max((s - 1.0).abs());
                }
            }
        }
    }
    verdict(
        worst < 1e-10 && worst_sum < 1e-9,
        format!("max |diff| {worst:.2e} (tol 1e-10), max |row sum - 1| {worst_sum:.2e} (tol 1e-9) over 50 graphs"),
    )
}

// ---------------------------------------------------------------- 4

const FD_EPS: f64 = 1e-5;
const FD_FLOOR: f64 = 1e-5;

/// A scalar loss rebuilt on a fresh tape for each evaluation.
trait LossFn {
    fn eval<'t>(&self, tape: &'t Tape, store: &ParamStore) -> Var<'t>;
}

/// Largest relative error between the tape gradient and central finite
/// differences over `ids`, sampling at most `per_tensor` entries of each.
fn check_gradients(store: &mut ParamStore, ids: &[ParamId], per_tensor: usize, seed: u64, f: &dyn LossFn) -> (f64, usize) {
    let analytic = {
        let tape = Tape::new();
        f.eval(&tape, store).backward()
    };
    let value = |store: &ParamStore| {
        let tape = Tape::new();
        f.eval(&tape, store).item()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut worst, mut checked) = (0.0f64, 0usize);
    for &id in ids {
        let (rows, cols) = store.get(id).dim();
        let mut coords: Vec<(usize, usize)> = (0..rows).flat_map(|r| (0..cols).map(move |c| (r, c))).collect();
        coords.shuffle(&mut rng);
        coords.truncate(per_tensor);
        for (r, c) in coords {
            let a = analytic.get(id).map_or(0.0, |g| g[[r, c]]);
            let orig = store.get(id)[[r, c]];
            store.get_mut(id)[[r, c]] = orig + FD_EPS;
            let plus = value(store);
            store.get_mut(id)[[r, c]] = orig - FD_EPS;
            let minus = value(store);
            store.get_mut(id)[[r, c]] = orig;
            let numeric = (plus - minus) / (2.0 * FD_EPS);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FD_FLOOR);
            worst = worst.max(rel);
            checked += 1;
        }
    }
    (worst, checked)
}

struct GatLoss<'a> {
    gat: &'a DialogueGat,
    input: &'a GraphInput,
    weights: Matrix,
}

impl LossFn for GatLoss<'_> {
    fn eval<'t>(&self, tape: &'t Tape, store: &ParamStore) -> Var<'t> {
        let (out, _) = self.gat.forward(tape, store, self.input, false).unwrap();
        out.mul(tape.constant(self.weights.clone())).sum()
    }
}

struct FusionLoss<'a> {
    fusion: &'a Fusion,
    h_c: Matrix,
    h_p: Matrix,
    weights: Matrix,
}

impl LossFn for FusionLoss<'_> {
    fn eval<'t>(&self, tape: &'t Tape, store: &ParamStore) -> Var<'t> {
        let (hd, _) = self
            .fusion
            .forward(tape, store, tape.constant(self.h_c.clone()), tape.constant(self.h_p.clone()))
            .unwrap();
        hd.mul(tape.constant(self.weights.clone())).sum()
    }
}

#[derive(Clone, Copy)]
enum Head {
    Rc,
    Direct,
    Seq,
    Lp,
}

struct HeadLoss<'a> {
    model: &'a CoherenceModel,
    input: &'a PairInput,
    class_weights: &'a [f64],
    head: Head,
}

impl LossFn for HeadLoss<'_> {
    fn eval<'t>(&self, tape: &'t Tape, store: &ParamStore) -> Var<'t> {
        let (parts, _) = self.model.losses(tape, store, self.input, self.class_weights).unwrap();
        match self.head {
            Head::Rc => parts.rc,
            Head::Direct => parts.direct,
            Head::Seq => parts.seq,
            Head::Lp => parts.lp,
        }
    }
}

struct GenLoss<'a> {
    model: &'a GeneratorModel,
    input: &'a DecoderInput,
    rows: Vec<usize>,
    targets: Vec<usize>,
}

impl LossFn for GenLoss<'_> {
    fn eval<'t>(&self, tape: &'t Tape, store: &ParamStore) -> Var<'t> {
        self.model.nll(tape, store, self.input, &self.rows, &self.targets).unwrap()
    }
}

fn small_generator_config() -> GeneratorConfig {
    GeneratorConfig {
        d_model: 16,
        heads: 2,
        ffn_dim: 32,
        max_source_len: 96,
        ..GeneratorConfig::default()
    }
}

/// A decoder input for the first bot turn of `d`, with random memory and
/// the given response types.
fn decoder_input(vocab: &Vocabulary, cfg: &GeneratorConfig, d: &Dialogue, types: &[RelationLabel], memory_dim: usize, seed: u64) -> (DecoderInput, Vec<usize>, Vec<usize>) {
    let context = vec![d.utterances[0].text.clone()];
    let source = build_encoder_input(vocab, &d.persona, &context, cfg.max_source_len).unwrap();
    let prompt = build_prompt(vocab, types, cfg.variant);
    let mut target = vec![vocab.bos()];
    target.extend(prompt);
    target.push(vocab.rsp());
    target.extend(vocab.encode(&d.utterances[1].text));
    let mut next = target[1..].to_vec();
    next.push(vocab.eos());
    let rows: Vec<usize> = (0..target.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let memory = uniform(&mut rng, d.len(), memory_dim, 1.0);
    (
        DecoderInput {
            source,
            target,
            memory: Some(memory),
            types: types.to_vec(),
        },
        rows,
        next,
    )
}

fn c4_gradients(_: &mut Shared) -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut report = Vec::new();
    let mut worst_all = 0.0f64;

    // Graph attention on random 6-node graphs, all channels and relations.
    let mut worst = 0.0f64;
    let mut count = 0;
    for case in 0..4 {
        let cfg = GatConfig {
            in_dim: 4,
            hidden_dim: 3,
            out_dim: 3,
            num_heads: 2,
            use_relations: true,
            lambda_learnable: true,
            combine: if case % 2 == 0 { CombineMode::Separate } else { CombineMode::Joint },
            ..GatConfig::default()
        };
        let mut store = ParamStore::new();
        let gat = DialogueGat::new(&mut store, &mut ChaCha8Rng::seed_from_u64(40 + case), "g.", cfg).unwrap();
        let (input, _) = random_graph(&mut rng, 6, 4);
        let loss = GatLoss {
            gat: &gat,
            input: &input,
            weights: uniform(&mut rng, 6, 3, 1.0),
        };
        let ids: Vec<ParamId> = store.ids().collect();
        let (w, c) = check_gradients(&mut store, &ids, usize::MAX, case, &loss);
        worst = worst.max(w);
        count += c;
    }
    report.push(format!("gat {worst:.1e}/{count}"));
    worst_all = worst_all.max(worst);

    // Context-persona fusion attention.
    let mut store = ParamStore::new();
    let fusion = Fusion::new(&mut store, &mut rng, "f.", 6, 2);
    let loss = FusionLoss {
        fusion: &fusion,
        h_c: uniform(&mut rng, 5, 6, 1.0),
        h_p: uniform(&mut rng, 3, 6, 1.0),
        weights: uniform(&mut rng, 5, 6, 1.0),
    };
    let ids: Vec<ParamId> = store.ids().collect();
    let (w, c) = check_gradients(&mut store, &ids, usize::MAX, 41, &loss);
    report.push(format!("fusion {w:.1e}/{c}"));
    worst_all = worst_all.max(w);

    // The four coherence heads on a fixture dialogue, through both encoders.
    let pairs = fixture_pairs(64);
    let class_weights = class_balanced_weights(&label_counts(pairs.iter().map(|p| &p.context)), 0.999);
    let mut store = ParamStore::new();
    let model = CoherenceModel::new(&mut store, CoherenceConfig::default()).unwrap();
    let input = PairInput::new(&pairs[0], 1.0, 7).unwrap();
    let ids: Vec<ParamId> = store.ids().collect();
    for (name, head) in [("rc", Head::Rc), ("direct", Head::Direct), ("seq", Head::Seq), ("lp", Head::Lp)] {
        let loss = HeadLoss {
            model: &model,
            input: &input,
            class_weights: &class_weights,
            head,
        };
        let (w, c) = check_gradients(&mut store, &ids, 4, 42, &loss);
        report.push(format!("{name} {w:.1e}/{c}"));
        worst_all = worst_all.max(w);
    }

    // Generator token loss with fixed aggregation decisions; the gate and
    // mask get no gradient in that mode and are left out.
    let fixture = annotated_fixture();
    let vocab = Vocabulary::from_corpus(&fixture);
    let cfg = small_generator_config();
    let mut store = ParamStore::new();
    let mut gen = GeneratorModel::new(&mut store, cfg.clone(), vocab.len(), 12, vocab.pad()).unwrap();
    gen.straight_through = false;
    let types = [RelationLabel::from_index(0).unwrap(), RelationLabel::from_index(3).unwrap()];
    let (input, rows, targets) = decoder_input(&vocab, &cfg, &fixture[0], &types, 12, 43);
    let loss = GenLoss {
        model: &gen,
        input: &input,
        rows,
        targets,
    };
    let ids: Vec<ParamId> = store.ids().filter(|&id| !store.name(id).contains(".dwa.")).collect();
    let (w, c) = check_gradients(&mut store, &ids, 6, 44, &loss);
    report.push(format!("generator {w:.1e}/{c}"));
    worst_all = worst_all.max(w);

    let secs = start.elapsed().as_secs_f64();
    verdict(
        worst_all < 1e-4 && secs < 60.0,
        format!("max rel err {worst_all:.2e} (tol 1e-4) [{}], {secs:.1}s (limit 60s)", report.join(", ")),
    )
}

// ---------------------------------------------------------------- 5

/// Per-token NLL from explicit log-sum-exp over the logits.
fn nll_oracle(model: &GeneratorModel, store: &ParamStore, examples: &[TrainingExample]) -> (f64, usize) {
    let mut total = 0.0;
    let mut tokens = 0;
    for ex in examples {
        let logits = model.logits_matrix(store, &ex.input).unwrap();
        for (&r, &y) in ex.rows.iter().zip(&ex.targets) {
            let row: Vec<f64> = logits.row(r).to_vec();
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - m).exp()).sum();
            total += -(row[y] - m - z.ln());
            tokens += 1;
        }
    }
    (total, tokens)
}

fn c5_losses(_: &mut Shared) -> Verdict {
    // Pre-training loss is the sum of its three task losses.
    let pairs = fixture_pairs(64);
    let mut store = ParamStore::new();
    let gat = GatConfig {
        use_relations: false,
        ..GatConfig::default()
    };
    let model = PretrainModel::new(&mut store, gat, 32, 5).unwrap();
    let mut da_err = 0.0f64;
    for (k, p) in pairs.iter().enumerate() {
        let input = GraphInput::from_dialogue(&p.context);
        let batch = build_batch(&p.context, 8, k as u64).unwrap();
        let only = |spp: bool, tc: bool, gr: bool| PretrainBatch {
            spp_pairs: if spp { batch.spp_pairs.clone() } else { vec![] },
            tc_pairs: if tc { batch.tc_pairs.clone() } else { vec![] },
            gr_targets: if gr { batch.gr_targets.clone() } else { vec![] },
        };
        let da = |b: &PretrainBatch| {
            let tape = Tape::new();
            model.losses(&tape, &store, &input, b).unwrap().values().da
        };
        let sum = da(&only(true, false, false)) + da(&only(false, true, false)) + da(&only(false, false, true));
        da_err = da_err.max((da(&batch) - sum).abs());
    }

    // Fine-tuning loss is linear in its weights.
    let class_weights = class_balanced_weights(&label_counts(pairs.iter().map(|p| &p.context)), 0.999);
    let mut cstore = ParamStore::new();
    let mut cmodel = CoherenceModel::new(&mut cstore, CoherenceConfig::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut dcu_err = 0.0f64;
    for p in pairs.iter().take(6) {
        let input = PairInput::new(p, 1.0, 9).unwrap();
        let mut value = |w: DcuWeights| {
            cmodel.config.weights = w;
            let tape = Tape::new();
            let (parts, total) = cmodel.losses(&tape, &cstore, &input, &class_weights).unwrap();
            let direct = dcu_loss(parts.rc.item(), parts.direct.item(), parts.seq.item(), parts.lp.item(), &w);
            (total.item(), direct)
        };
        let w = |rng: &mut ChaCha8Rng| DcuWeights {
            alpha: rng.gen_range(0.0..2.0),
            beta: rng.gen_range(0.0..2.0),
            gamma: rng.gen_range(0.0..2.0),
            delta: rng.gen_range(0.0..2.0),
        };
        let (w1, w2) = (w(&mut rng), w(&mut rng));
        let (a, b) = (rng.gen_range(0.0..2.0), rng.gen_range(0.0..2.0));
        let mix = DcuWeights {
            alpha: a * w1.alpha + b * w2.alpha,
            beta: a * w1.beta + b * w2.beta,
            gamma: a * w1.gamma + b * w2.gamma,
            delta: a * w1.delta + b * w2.delta,
        };
        let (f1, d1) = value(w1);
        let (f2, d2) = value(w2);
        let (fm, dm) = value(mix);
        dcu_err = dcu_err.max((fm - (a * f1 + b * f2)).abs()).max((f1 - d1).abs()).max((f2 - d2).abs()).max((fm - dm).abs());
    }

    // Token loss against the explicit oracle.
    let fixture = annotated_fixture();
    let vocab = Vocabulary::from_corpus(&fixture);
    let cfg = small_generator_config();
    let mut gstore = ParamStore::new();
    let gen = GeneratorModel::new(&mut gstore, cfg.clone(), vocab.len(), 12, vocab.pad()).unwrap();
    let examples: Vec<TrainingExample> = fixture
        .iter()
        .take(8)
        .enumerate()
        .map(|(k, d)| {
            let types = [RelationLabel::from_index(k % NUM_RELATIONS).unwrap()];
            let (input, rows, targets) = decoder_input(&vocab, &cfg, d, &types, 12, k as u64);
            TrainingExample {
                dialogue_id: d.dialogue_id.clone(),
                persona: d.persona.clone(),
                context: vec![d.utterances[0].text.clone()],
                response: d.utterances[1].text.clone(),
                types: types.iter().map(|&t| (t, 1.0)).collect(),
                input,
                rows,
                targets,
            }
        })
        .collect();
    let (total, tokens) = nll_oracle(&gen, &gstore, &examples);
    let lib = mean_token_loss(&gen, &gstore, &examples).unwrap();
    let nll_err = (lib - total / tokens as f64).abs();
    let uniform_gap = (total / tokens as f64 - (vocab.len() as f64).ln()).abs();

    verdict(
        da_err <= 1e-12 && dcu_err <= 1e-12 && nll_err <= 1e-10,
        format!(
            "l_da additivity {da_err:.1e}, l_dcu linearity {dcu_err:.1e} (tol 1e-12); token nll vs oracle {nll_err:.1e} (tol 1e-10); init loss {:.3} vs ln V {:.3} (gap {uniform_gap:.3})",
            total / tokens as f64,
            (vocab.len() as f64).ln()
        ),
    )
}

// ---------------------------------------------------------------- 6

fn floyd_warshall(n: usize, edges: impl Iterator<Item = (usize, usize)>) -> Vec<Vec<Option<usize>>> {
    let mut dist = vec![vec![None; n]; n];
    for (i, row) in dist.iter_mut().enumerate() {
        row[i] = Some(0);
    }
    for (i, j) in edges {
        if i != j {
            dist[i][j] = Some(1);
            dist[j][i] = Some(1);
        }
    }
    for k in 0..n {
        for i in 0..n {
            for j in 0..n {
                if let (Some(a), Some(b)) = (dist[i][k], dist[k][j]) {
                    if dist[i][j].is_none_or(|d| a + b < d) {
                        dist[i][j] = Some(a + b);
                    }
                }
            }
        }
    }
    dist
}

fn c6_pretrain(_: &mut Shared) -> Verdict {
    let cfg = RunConfig::default();
    let contexts: Vec<_> = fixture_pairs(cfg.graphs.embed_dim).into_iter().map(|p| p.context).collect();
    let mut sampled = 0;
    for (k, g) in contexts.iter().enumerate() {
        let dist = floyd_warshall(
            g.num_nodes(),
            g.base_edges.iter().chain(&g.order_edges).chain(&g.turn_edges).copied(),
        );
        for p in build_batch(g, cfg.pretrain.pairs_per_graph, k as u64).unwrap().spp_pairs {
            sampled += 1;
            if p.i == p.j || dist[p.i][p.j] != Some(p.length) {
                return Verdict::Fail(format!("graph {k}: pair ({}, {}) length {} vs oracle {:?}", p.i, p.j, p.length, dist[p.i][p.j]));
            }
        }
    }
    let outcome = run_pretraining(&cfg.pretrain, &cfg.pretrain_gat(), &contexts, None, "acceptance").unwrap();
    let first = outcome.log[0].losses.da;
    let last = outcome.log.last().unwrap().losses.da;
    let drop = 1.0 - last / first;
    verdict(
        drop >= 0.5 && cfg.pretrain.epochs <= 200,
        format!(
            "{sampled} shortest-path targets match the oracle; l_da {first:.4} -> {last:.4} after {} epochs ({:.1}% drop, need 50%)",
            cfg.pretrain.epochs,
            100.0 * drop
        ),
    )
}

// ---------------------------------------------------------------- 7

fn exact_matches(run_dir: &Path) -> (usize, usize) {
    let gens = mudi_core::generator::read_generations(&run_dir.join("generations.jsonl")).unwrap();
    let refs: Vec<EvalRecord> = read_jsonl(&run_dir.join("references.jsonl")).unwrap();
    let hits = gens.iter().zip(&refs).filter(|(g, r)| tokenize(&g.response) == tokenize(&r.reference)).count();
    (hits, refs.len())
}

fn c7_memorization(shared: &mut Shared) -> Verdict {
    let mut cfg = RunConfig::default();
    cfg.run_dir = shared.dir("memorize");
    cfg.generator.epochs = 500;
    let summary = match Pipeline::new(cfg.clone()).and_then(|p| p.run(Stage::Annotate)) {
        Ok(s) => s,
        Err(e) => return Verdict::Fail(e.to_string()),
    };
    let (hits, total) = exact_matches(&summary.run_dir);
    let manifest = checkpoint::read_manifest(&cfg.run_dir.join("ckpt").join("gen")).unwrap();
    let loss = manifest.meta["summary"]["final_token_loss"].as_f64().unwrap();
    let frac = hits as f64 / total as f64;
    verdict(
        frac >= 0.9 && loss < 0.1,
        format!("{hits}/{total} exact ({:.1}%, need 90%), token loss {loss:.4} (need < 0.1) after 500 epochs", 100.0 * frac),
    )
}

// ---------------------------------------------------------------- 8

fn c8_dwa(_: &mut Shared) -> Verdict {
    let dim = 8;
    let rows = 1000;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut store = ParamStore::new();
    let mut dwa = DwaParams::new(&mut store, &mut rng, "dwa.", dim, 0.0);
    *store.get_mut(dwa.mask) = uniform(&mut rng, 1, dim, 3.0);
    let c_p = uniform(&mut rng, rows, dim, 2.0);
    let c_c = uniform(&mut rng, rows, dim, 2.0);
    let run = |store: &ParamStore, dwa: &DwaParams| {
        let tape = Tape::new();
        let (out, b) = dynamic_weighted_aggregation(&tape, store, dwa, tape.constant(c_p.clone()), tape.constant(c_c.clone()), true);
        (out.value(), b.value())
    };
    dwa.tau = 0.0;
    let (out0, _) = run(&store, &dwa);
    dwa.tau = 1.0;
    let (out1, _) = run(&store, &dwa);
    let mut selection_ok = true;
    let mut both_used = (false, false);
    for tau in [0.05, 0.1, 0.2, 0.3, 0.5] {
        dwa.tau = tau;
        let (out, b) = run(&store, &dwa);
        for ((o, bb), (p, c)) in out.iter().zip(b.iter()).zip(c_p.iter().zip(c_c.iter())) {
            let ok = if *bb == 1.0 { o == p } else { *bb == 0.0 && o == c };
            selection_ok &= ok;
            both_used.0 |= *bb == 1.0;
            both_used.1 |= *bb == 0.0;
        }
    }
    let same = {
        let tape = Tape::new();
        dwa.tau = 0.3;
        let (out, _) = dynamic_weighted_aggregation(&tape, &store, &dwa, tape.constant(c_p.clone()), tape.constant(c_p.clone()), true);
        out.value() == c_p
    };
    verdict(
        out0 == c_p && out1 == c_c && selection_ok && same && both_used.0 && both_used.1,
        format!(
            "tau=0 gives persona branch: {}, tau=1 gives coherence branch: {}, selection over {rows}x{dim}x5 taus: {selection_ok}, equal inputs preserved: {same}",
            out0 == c_p,
            out1 == c_c
        ),
    )
}

// ---------------------------------------------------------------- 9

fn c9_collapse(_: &mut Shared) -> Verdict {
    let fixture = annotated_fixture();
    let vocab = Vocabulary::from_corpus(&fixture);
    let cfg = small_generator_config();
    let mut store = ParamStore::new();
    let mut model = GeneratorModel::new(&mut store, cfg.clone(), vocab.len(), 12, vocab.pad()).unwrap();
    store.get_mut(model.relation_embedding).fill(0.0);
    let types = [
        RelationLabel::from_index(2).unwrap(),
        RelationLabel::from_index(5).unwrap(),
        RelationLabel::from_index(9).unwrap(),
    ];
    let mut outputs: Vec<(Variant, Matrix)> = Vec::new();
    for variant in Variant::ALL {
        model.config.variant = variant;
        let vcfg = GeneratorConfig { variant, ..cfg.clone() };
        let (mut input, _, _) = decoder_input(&vocab, &vcfg, &fixture[3], &types, 12, 99);
        for t in input.target.iter_mut() {
            if vocab.is_relation(*t) {
                *t = vocab.pad();
            }
        }
        let keep: Vec<usize> = (0..input.target.len()).filter(|&k| input.target[k] != vocab.pad()).collect();
        let logits = model.logits_matrix(&store, &input).unwrap();
        outputs.push((variant, logits.select(ndarray::Axis(0), &keep)));
    }
    let reference = &outputs[0].1;
    let diffs: Vec<String> = outputs
        .iter()
        .map(|(v, m)| {
            let d = if m.dim() == reference.dim() { max_abs_diff(m, reference) } else { f64::INFINITY };
            format!("{v}: {d:e}")
        })
        .collect();
    let identical = outputs.iter().all(|(_, m)| m == reference);
    verdict(identical, format!("max |logit diff| vs sp: {}", diffs.join(", ")))
}

// ---------------------------------------------------------------- 10

fn brute_ngrams(corpus: &[Vec<String>], n: usize) -> Vec<Vec<String>> {
    let mut out = Vec::new();
    for s in corpus {
        if s.len() >= n {
            for i in 0..=s.len() - n {
                out.push(s[i..i + n].to_vec());
            }
        }
    }
    out
}

fn brute_dist(corpus: &[Vec<String>], n: usize) -> Option<f64> {
    let all = brute_ngrams(corpus, n);
    if all.is_empty() {
        return None;
    }
    let mut uniq = all.clone();
    uniq.sort();
    uniq.dedup();
    Some(uniq.len() as f64 / all.len() as f64)
}

fn brute_ent(corpus: &[Vec<String>], n: usize) -> Option<f64> {
    let all = brute_ngrams(corpus, n);
    if all.is_empty() {
        return None;
    }
    let mut hist: HashMap<Vec<String>, f64> = HashMap::new();
    for g in &all {
        *hist.entry(g.clone()).or_default() += 1.0;
    }
    let t = all.len() as f64;
    Some(hist.values().map(|c| -(c / t) * (c / t).ln()).sum::<f64>().max(0.0))
}

fn clipped_overlap(c: &[String], r: &[String]) -> usize {
    let mut avail: HashMap<&String, usize> = HashMap::new();
    for t in r {
        *avail.entry(t).or_default() += 1;
    }
    let mut m = 0;
    for t in c {
        if let Some(k) = avail.get_mut(t) {
            if *k > 0 {
                *k -= 1;
                m += 1;
            }
        }
    }
    m
}

fn brute_bleu1(cands: &[Vec<String>], refs: &[Vec<String>]) -> f64 {
    let m: usize = cands.iter().zip(refs).map(|(c, r)| clipped_overlap(c, r)).sum();
    let c: usize = cands.iter().map(Vec::len).sum();
    let r: usize = refs.iter().map(Vec::len).sum();
    if c == 0 {
        return 0.0;
    }
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    100.0 * bp * m as f64 / c as f64
}

fn brute_rouge1(cands: &[Vec<String>], refs: &[Vec<String>]) -> f64 {
    let f: Vec<f64> = cands
        .iter()
        .zip(refs)
        .map(|(c, r)| {
            let m = clipped_overlap(c, r) as f64;
            if m == 0.0 {
                0.0
            } else {
                let (p, rc) = (m / c.len() as f64, m / r.len() as f64);
                2.0 * p * rc / (p + rc)
            }
        })
        .collect();
    if f.is_empty() {
        0.0
    } else {
        100.0 * f.iter().sum::<f64>() / f.len() as f64
    }
}

fn brute_usr(sentences: &[String]) -> f64 {
    let mut norm: Vec<String> = sentences
        .iter()
        .map(|s| s.split_whitespace().map(str::to_lowercase).collect::<Vec<_>>().join(" "))
        .collect();
    let total = norm.len() as f64;
    norm.sort();
    norm.dedup();
    norm.len() as f64 / total
}

fn close(a: Option<f64>, b: Option<f64>) -> f64 {
    match (a, b) {
        (Some(x), Some(y)) => (x - y).abs(),
        (None, None) => 0.0,
        _ => f64::INFINITY,
    }
}

fn c10_metrics(_: &mut Shared) -> Verdict {
    let words = ["the", "cat", "sat", "on", "a", "mat", "dog", "ran"];
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = rng.gen_range(1..=8);
        let sentence = |rng: &mut ChaCha8Rng, min: usize| -> String {
            (0..rng.gen_range(min..=7))
                .map(|_| {
                    let w = *words.choose(rng).unwrap();
                    if rng.gen_bool(0.2) { w.to_uppercase() } else { w.to_string() }
                })
                .collect::<Vec<_>>()
                .join(if rng.gen_bool(0.2) { "  " } else { " " })
        };
        let hyps: Vec<String> = (0..n).map(|_| sentence(&mut rng, 0)).collect();
        let refs: Vec<String> = (0..n).map(|_| sentence(&mut rng, 1)).collect();
        let toks = |xs: &[String]| -> Vec<Vec<String>> {
            xs.iter().map(|s| s.split_whitespace().map(str::to_lowercase).collect()).collect()
        };
        let (h, r) = (toks(&hyps), toks(&refs));
        let report = evaluate(
            &EvalInput {
                hypotheses: hyps.clone(),
                references: refs.clone(),
                personas: vec![],
            },
            &Metric::DEFAULT,
            None,
        )
        .unwrap();
        for k in [1, 2] {
            worst = worst.max(close(report.dist_n[&k], brute_dist(&h, k)));
            worst = worst.max(close(report.ent_n[&k], brute_ent(&h, k)));
            worst = worst.max(close(distinct_n(&h, k), brute_dist(&h, k)));
            worst = worst.max(close(entropy_n(&h, k), brute_ent(&h, k)));
        }
        worst = worst.max(close(report.usr, Some(brute_usr(&hyps))));
        worst = worst.max(close(report.bleu1, Some(brute_bleu1(&h, &r))));
        worst = worst.max(close(report.rouge1, Some(brute_rouge1(&h, &r))));
        worst = worst.max((bleu1(&h, &r).unwrap() - brute_bleu1(&h, &r)).abs());
        worst = worst.max((rouge1(&h, &r).unwrap() - brute_rouge1(&h, &r)).abs());
    }
    let distinct: Vec<String> = (0..50).map(|i| format!("response number {i}")).collect();
    let usr_distinct = usr(&distinct);
    verdict(
        worst < 1e-12 && usr_distinct == Some(1.0),
        format!("max |diff| {worst:.1e} over 100 corpora (tol 1e-12); USR of distinct output {usr_distinct:?}"),
    )
}

// ---------------------------------------------------------------- 11

fn c11_determinism(shared: &mut Shared) -> Verdict {
    let mut reports = Vec::new();
    let mut times = Vec::new();
    for name in ["run-a", "run-b"] {
        let mut cfg = RunConfig::default();
        cfg.run_dir = shared.dir(name);
        let start = Instant::now();
        if let Err(e) = Pipeline::new(cfg.clone()).and_then(|p| p.run(Stage::Annotate)) {
            return Verdict::Fail(format!("{name}: {e}"));
        }
        times.push(start.elapsed());
        let bytes = |f: &str| fs::read(cfg.run_dir.join(f)).unwrap();
        reports.push((bytes("report.json"), bytes("generations.jsonl")));
        if name == "run-a" {
            shared.main_run = Some(cfg);
        }
    }
    let limit = Duration::from_secs(15 * 60);
    let report: mudi_core::metrics::EvalReport = serde_json::from_slice(&reports[0].0).unwrap();
    let same = reports[0] == reports[1];
    verdict(
        same && times.iter().all(|t| *t < limit) && report.responses > 0,
        format!(
            "reports identical: {same}; runs took {:.0}s and {:.0}s (limit 900s); BLEU-1 {:.2} over {} responses",
            times[0].as_secs_f64(),
            times[1].as_secs_f64(),
            report.bleu1.unwrap_or(f64::NAN),
            report.responses
        ),
    )
}

// ---------------------------------------------------------------- 12

fn c12_ablation(shared: &mut Shared) -> Verdict {
    let Some(cfg) = shared.main_run.clone() else {
        return Verdict::Fail("needs the pipeline run of criterion 11".into());
    };
    let reports: BTreeMap<FusionMode, _> = match Pipeline::new(cfg).and_then(|p| p.ablate(&[FusionMode::Attention, FusionMode::Random])) {
        Ok(r) => r,
        Err(e) => return Verdict::Fail(e.to_string()),
    };
    let att = reports[&FusionMode::Attention].bleu1.unwrap();
    let rnd = reports[&FusionMode::Random].bleu1.unwrap();
    verdict(att >= rnd, format!("training-fixture BLEU-1 attention {att:.2} vs random {rnd:.2}"))
}
