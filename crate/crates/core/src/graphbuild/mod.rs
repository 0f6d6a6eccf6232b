//! Dialogue and persona graph construction.
//!
//! A dialogue graph has one node per utterance and three directed edge sets:
//!
//! * base edges `(i, i+1)` carrying the annotated relation labels,
//! * order edges `(i, j)` for every forward pair with order difference `< d`,
//! * turn edges between the two utterances of an exchange, both directions.
//!
//! Graphs serialize to JSON (see [`save_graphs`]); `f64` values round-trip
//! exactly.

mod embed;
mod prune;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Dialogue, RelationLabel, Speaker};
use crate::nn::Matrix;

pub use embed::{EmbedError, EmbeddingProvider, HashingEmbedder, HttpEmbedder, EMBED_ENDPOINT_ENV};
pub use prune::{high_frequency_labels, label_frequencies, prune_for_balance};

pub type Edge = (usize, usize);

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("dialogue {0} is not annotated")]
    Unannotated(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error("graph io error at {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("graph file {path}: {source}")]
    Format {
        path: String,
        source: serde_json::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeRelation {
    pub source: usize,
    pub target: usize,
    pub labels: Vec<RelationLabel>,
}

mod relation_map {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(
        map: &BTreeMap<Edge, Vec<RelationLabel>>,
        s: S,
    ) -> Result<S::Ok, S::Error> {
        let list: Vec<EdgeRelation> = map
            .iter()
            .map(|(&(source, target), labels)| EdgeRelation {
                source,
                target,
                labels: labels.clone(),
            })
            .collect();
        list.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        d: D,
    ) -> Result<BTreeMap<Edge, Vec<RelationLabel>>, D::Error> {
        let list = Vec::<EdgeRelation>::deserialize(d)?;
        Ok(list
            .into_iter()
            .map(|e| ((e.source, e.target), e.labels))
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DialogueGraph {
    pub dialogue_id: String,
    pub node_features: Matrix,
    pub base_edges: Vec<Edge>,
    pub order_edges: Vec<Edge>,
    pub turn_edges: Vec<Edge>,
    #[serde(with = "relation_map")]
    pub edge_relations: BTreeMap<Edge, Vec<RelationLabel>>,
    pub orders: Vec<usize>,
    pub turns: Vec<usize>,
    pub speakers: Vec<Speaker>,
    /// Maximum order difference plus one, used to build `order_edges`.
    pub d: usize,
}

impl DialogueGraph {
    pub fn num_nodes(&self) -> usize {
        self.node_features.nrows()
    }

    /// Structural invariants of the three edge sets.
    pub fn check_invariants(&self) -> Result<(), String> {
        let n = self.num_nodes();
        if self.orders.len() != n || self.turns.len() != n || self.speakers.len() != n {
            return Err("metadata length differs from node count".into());
        }
        for &(i, j) in &self.order_edges {
            if !matches!(order_indicator(self.orders[i], self.orders[j], self.d), Ok(1)) {
                return Err(format!("order edge ({i},{j}) violates the indicator"));
            }
        }
        for &(i, j) in &self.turn_edges {
            if i == j || self.turns[i] != self.turns[j] || !self.turn_edges.contains(&(j, i)) {
                return Err(format!("turn edge ({i},{j}) is not a symmetric same-turn pair"));
            }
        }
        for &(i, j) in &self.base_edges {
            if j != i + 1 {
                return Err(format!("base edge ({i},{j}) is not adjacent"));
            }
        }
        let keys: Vec<Edge> = self.edge_relations.keys().copied().collect();
        let mut base = self.base_edges.clone();
        base.sort_unstable();
        if keys != base {
            return Err("edge_relations keys differ from base_edges".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonaGraph {
    pub node_features: Matrix,
    pub edges: Vec<Edge>,
}

impl PersonaGraph {
    pub fn num_nodes(&self) -> usize {
        self.node_features.nrows()
    }
}

/// Context graph and persona graph of one dialogue.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphPair {
    pub context: DialogueGraph,
    pub persona: PersonaGraph,
}

/// Forward-only order window: 1 iff `order_j > order_i` and the difference
/// is below `d`.
pub fn order_indicator(order_i: usize, order_j: usize, d: usize) -> Result<u8, GraphError> {
    if d < 1 {
        return Err(GraphError::Argument(format!("d must be >= 1, got {d}")));
    }
    Ok(u8::from(order_j > order_i && order_j - order_i < d))
}

fn embed_rows(texts: &[&str], provider: &dyn EmbeddingProvider, dim: usize) -> Result<Matrix, GraphError> {
    if provider.dim() != dim {
        return Err(GraphError::Config(format!(
            "provider {} has dimension {}, configuration expects {dim}",
            provider.name(),
            provider.dim()
        )));
    }
    let mut m = Matrix::zeros((texts.len(), dim));
    for (r, t) in texts.iter().enumerate() {
        let v = provider.embed(t)?;
        if v.len() != dim {
            return Err(EmbedError::Dimension {
                found: v.len(),
                expected: dim,
            }
            .into());
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(EmbedError::NonFinite.into());
        }
        m.row_mut(r).assign(&ndarray::ArrayView1::from(&v));
    }
    Ok(m)
}

/// All `(i, j)` with `order_indicator(orders[i], orders[j], d) == 1`.
pub fn order_edges(orders: &[usize], d: usize) -> Result<Vec<Edge>, GraphError> {
    let mut out = Vec::new();
    for (i, &oi) in orders.iter().enumerate() {
        for (j, &oj) in orders.iter().enumerate() {
            if order_indicator(oi, oj, d)? == 1 {
                out.push((i, j));
            }
        }
    }
    Ok(out)
}

/// All ordered same-turn pairs `(i, j)`, `i != j`.
pub fn turn_edges(turns: &[usize]) -> Vec<Edge> {
    let mut out = Vec::new();
    for (i, &ti) in turns.iter().enumerate() {
        for (j, &tj) in turns.iter().enumerate() {
            if i != j && ti == tj {
                out.push((i, j));
            }
        }
    }
    out
}

/// Builds the context graph of an annotated dialogue. `d` is the order
/// window (`k_hop + 1`); `dim` the expected embedding dimension.
pub fn build_dialogue_graph(
    dialogue: &Dialogue,
    provider: &dyn EmbeddingProvider,
    d: usize,
    dim: usize,
) -> Result<DialogueGraph, GraphError> {
    if d < 1 {
        return Err(GraphError::Argument(format!("d must be >= 1, got {d}")));
    }
    let n = dialogue.utterances.len();
    let mut edge_relations = BTreeMap::new();
    for i in 0..n.saturating_sub(1) {
        let labels = dialogue
            .labels_between(i, i + 1)
            .ok_or_else(|| GraphError::Unannotated(dialogue.dialogue_id.clone()))?;
        edge_relations.insert((i, i + 1), labels.to_vec());
    }
    let texts: Vec<&str> = dialogue.utterances.iter().map(|u| u.text.as_str()).collect();
    let node_features = embed_rows(&texts, provider, dim)?;
    let orders: Vec<usize> = dialogue.utterances.iter().map(|u| u.id).collect();
    let turns: Vec<usize> = dialogue.utterances.iter().map(|u| u.turn_index).collect();
    Ok(DialogueGraph {
        dialogue_id: dialogue.dialogue_id.clone(),
        node_features,
        base_edges: edge_relations.keys().copied().collect(),
        order_edges: order_edges(&orders, d)?,
        turn_edges: turn_edges(&turns),
        edge_relations,
        orders,
        turns,
        speakers: dialogue.utterances.iter().map(|u| u.speaker).collect(),
        d,
    })
}

/// Complete digraph without self-loops over the persona sentences.
pub fn build_persona_graph(
    persona: &[String],
    provider: &dyn EmbeddingProvider,
    dim: usize,
) -> Result<PersonaGraph, GraphError> {
    if persona.is_empty() {
        return Err(GraphError::Argument("persona must be non-empty".into()));
    }
    let texts: Vec<&str> = persona.iter().map(String::as_str).collect();
    let m = persona.len();
    let edges = (0..m)
        .flat_map(|i| (0..m).filter(move |&j| j != i).map(move |j| (i, j)))
        .collect();
    Ok(PersonaGraph {
        node_features: embed_rows(&texts, provider, dim)?,
        edges,
    })
}

pub fn build_pair(
    dialogue: &Dialogue,
    provider: &dyn EmbeddingProvider,
    d: usize,
    dim: usize,
) -> Result<GraphPair, GraphError> {
    Ok(GraphPair {
        context: build_dialogue_graph(dialogue, provider, d, dim)?,
        persona: build_persona_graph(&dialogue.persona, provider, dim)?,
    })
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> GraphError + '_ {
    move |source| GraphError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Writes one `<index>.json` file per graph pair plus `index.json` listing
/// the files in corpus order.
pub fn save_graphs(dir: &Path, pairs: &[GraphPair]) -> Result<(), GraphError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut names = Vec::with_capacity(pairs.len());
    for (i, p) in pairs.iter().enumerate() {
        let name = format!("{i:06}.json");
        let path = dir.join(&name);
        let bytes = serde_json::to_vec(p).map_err(|source| GraphError::Format {
            path: path.display().to_string(),
            source,
        })?;
        fs::write(&path, bytes).map_err(io_err(&path))?;
        names.push(name);
    }
    let index = dir.join("index.json");
    fs::write(&index, serde_json::to_vec_pretty(&names).expect("names serialize")).map_err(io_err(&index))
}

pub fn load_graphs(dir: &Path) -> Result<Vec<GraphPair>, GraphError> {
    let index = dir.join("index.json");
    let bytes = fs::read(&index).map_err(io_err(&index))?;
    let names: Vec<String> = serde_json::from_slice(&bytes).map_err(|source| GraphError::Format {
        path: index.display().to_string(),
        source,
    })?;
    names
        .iter()
        .map(|name| {
            let path = dir.join(name);
            let bytes = fs::read(&path).map_err(io_err(&path))?;
            serde_json::from_slice(&bytes).map_err(|source| GraphError::Format {
                path: path.display().to_string(),
                source,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{annotate, HeuristicAnnotator};
    use std::collections::BTreeSet;

    fn four_utterances() -> Dialogue {
        let d = Dialogue::from_texts(
            "g",
            vec!["i like tea.".into()],
            &["hi, how are you?", "fine, thanks.", "do you like tea?", "yes, green tea."],
        )
        .unwrap();
        annotate(&d, &HeuristicAnnotator)
    }

    fn set(edges: &[Edge]) -> BTreeSet<Edge> {
        edges.iter().copied().collect()
    }

    #[test]
    fn order_indicator_examples() {
        assert_eq!(order_indicator(1, 2, 2).unwrap(), 1);
        assert_eq!(order_indicator(2, 1, 5).unwrap(), 0);
        assert_eq!(order_indicator(0, 3, 3).unwrap(), 0);
        assert!(order_indicator(0, 1, 0).is_err());
    }

    #[test]
    fn four_node_edge_sets() {
        let e = HashingEmbedder::new(8, 0);
        let g2 = build_dialogue_graph(&four_utterances(), &e, 2, 8).unwrap();
        assert_eq!(set(&g2.order_edges), set(&[(0, 1), (1, 2), (2, 3)]));
        let g3 = build_dialogue_graph(&four_utterances(), &e, 3, 8).unwrap();
        assert_eq!(set(&g3.order_edges), set(&[(0, 1), (0, 2), (1, 2), (1, 3), (2, 3)]));
        assert_eq!(set(&g3.turn_edges), set(&[(0, 1), (1, 0), (2, 3), (3, 2)]));
        assert_eq!(g3.base_edges, vec![(0, 1), (1, 2), (2, 3)]);
        g3.check_invariants().unwrap();
    }

    #[test]
    fn unannotated_dialogue_is_a_state_error() {
        let mut d = four_utterances();
        d.annotations.clear();
        let e = HashingEmbedder::new(8, 0);
        assert!(matches!(build_dialogue_graph(&d, &e, 3, 8), Err(GraphError::Unannotated(_))));
    }

    #[test]
    fn provider_dimension_mismatch_is_a_config_error() {
        let e = HashingEmbedder::new(8, 0);
        assert!(matches!(
            build_dialogue_graph(&four_utterances(), &e, 3, 16),
            Err(GraphError::Config(_))
        ));
    }

    #[test]
    fn persona_graph_shapes() {
        let e = HashingEmbedder::new(16, 0);
        let p = |m: usize| (0..m).map(|i| format!("fact number {i}")).collect::<Vec<_>>();
        assert_eq!(build_persona_graph(&p(3), &e, 16).unwrap().edges.len(), 6);
        assert!(build_persona_graph(&p(1), &e, 16).unwrap().edges.is_empty());
        assert_eq!(build_persona_graph(&p(5), &e, 16).unwrap().node_features.dim(), (5, 16));
        assert!(matches!(build_persona_graph(&[], &e, 16), Err(GraphError::Argument(_))));
    }

    #[test]
    fn graphs_round_trip_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let e = HashingEmbedder::new(8, 1);
        let pair = build_pair(&four_utterances(), &e, 3, 8).unwrap();
        save_graphs(dir.path(), std::slice::from_ref(&pair)).unwrap();
        let loaded = load_graphs(dir.path()).unwrap();
        assert_eq!(loaded, vec![pair]);
    }
}
