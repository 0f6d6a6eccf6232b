use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{DialogueGraph, GraphError};
use crate::corpus::{RelationLabel, NUM_RELATIONS};

/// Fraction of base edges carrying each label, indexed by label.
pub fn label_frequencies(graphs: &[DialogueGraph]) -> [f64; NUM_RELATIONS] {
    let mut counts = [0usize; NUM_RELATIONS];
    let mut total = 0usize;
    for g in graphs {
        for labels in g.edge_relations.values() {
            total += 1;
            for l in labels {
                counts[l.index()] += 1;
            }
        }
    }
    let mut out = [0.0; NUM_RELATIONS];
    if total > 0 {
        for (o, c) in out.iter_mut().zip(counts) {
            *o = c as f64 / total as f64;
        }
    }
    out
}

/// Linear-interpolation quantile of a non-empty sample.
fn quantile(values: &mut [f64], q: f64) -> f64 {
    values.sort_by(f64::total_cmp);
    let pos = q * (values.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    values[lo] + (values[hi] - values[lo]) * (pos - lo as f64)
}

/// Labels whose frequency is strictly above the `q` quantile of the
/// frequencies of labels that occur at all.
pub fn high_frequency_labels(freqs: &[f64; NUM_RELATIONS], q: f64) -> BTreeSet<RelationLabel> {
    let mut observed: Vec<f64> = freqs.iter().copied().filter(|&f| f > 0.0).collect();
    if observed.is_empty() {
        return BTreeSet::new();
    }
    let cut = quantile(&mut observed, q);
    RelationLabel::ALL
        .iter()
        .copied()
        .filter(|l| freqs[l.index()] > cut)
        .collect()
}

/// Randomly drops base edges whose labels are all high-frequency, keeping
/// each such edge with probability `keep_prob`. Every other edge, and all
/// order and turn edges, are kept.
pub fn prune_for_balance(
    graphs: &[DialogueGraph],
    keep_prob: f64,
    high_freq_quantile: f64,
    seed: u64,
) -> Result<Vec<DialogueGraph>, GraphError> {
    if !(0.0..=1.0).contains(&keep_prob) {
        return Err(GraphError::Argument(format!("keep_prob {keep_prob} outside [0, 1]")));
    }
    if !(high_freq_quantile > 0.0 && high_freq_quantile < 1.0) {
        return Err(GraphError::Argument(format!(
            "quantile {high_freq_quantile} outside (0, 1)"
        )));
    }
    let high = high_frequency_labels(&label_frequencies(graphs), high_freq_quantile);
    Ok(graphs
        .par_iter()
        .enumerate()
        .map(|(i, g)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let mut out = g.clone();
            out.base_edges.clear();
            out.edge_relations.clear();
            for &edge in &g.base_edges {
                let labels = &g.edge_relations[&edge];
                let candidate = labels.iter().all(|l| high.contains(l));
                // Draw for every candidate so keep_prob = 1 consumes the same
                // stream as any other setting.
                let keep = !candidate || rng.gen::<f64>() < keep_prob;
                if keep {
                    out.base_edges.push(edge);
                    out.edge_relations.insert(edge, labels.clone());
                }
            }
            out
        })
        .collect())
}
