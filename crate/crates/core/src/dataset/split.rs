use std::collections::HashSet;

use rand::seq::index;
use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{normalize_pair, SocialGraph};
use crate::rng::{rng_from, stream_seed};

/// Held-out positive edges, equally many sampled non-edges, and the graph
/// that remains for training.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeSplit {
    pub train_graph: SocialGraph,
    pub heldout_pos: Vec<(u32, u32)>,
    pub heldout_neg: Vec<(u32, u32)>,
}

/// Hold out `⌈holdout_frac · |E|⌉` uniformly chosen edges and pair them with
/// as many uniform non-edges of the full graph.
pub fn split_edges(graph: &SocialGraph, holdout_frac: f64, seed: u64) -> Result<EdgeSplit> {
    if !(holdout_frac > 0.0 && holdout_frac < 1.0) {
        return Err(Error::InvalidArgument(format!("holdout_frac {holdout_frac} not in (0, 1)")));
    }
    let m = graph.n_edges();
    if m < 2 {
        return Err(Error::InvalidArgument(format!("graph has {m} edges, need at least 2")));
    }
    // guard against 0.1 * 1090 = 109.00000000000001
    let count = ((holdout_frac * m as f64) - 1e-9).ceil().clamp(1.0, (m - 1) as f64) as usize;
    let mut rng = rng_from(stream_seed(seed, "split"));
    let mut picked: Vec<usize> = index::sample(&mut rng, m, count).into_vec();
    picked.sort_unstable();
    let heldout_pos: Vec<(u32, u32)> = picked.iter().map(|&i| graph.edges()[i]).collect();
    let train_graph = graph.without_edges(&heldout_pos);
    let heldout_neg = sample_negative_pairs(graph, count, stream_seed(seed, "split-neg"), &HashSet::new())?;
    Ok(EdgeSplit {
        train_graph,
        heldout_pos,
        heldout_neg,
    })
}

/// `n` distinct unordered non-adjacent pairs `(u, v)` with `u < v` that are
/// not in `exclude`.
pub fn sample_negative_pairs(
    graph: &SocialGraph,
    n: usize,
    seed: u64,
    exclude: &HashSet<(u32, u32)>,
) -> Result<Vec<(u32, u32)>> {
    if n == 0 {
        return Err(Error::InvalidArgument("need at least one pair".into()));
    }
    let nodes = graph.n_nodes();
    let excluded_non_edges: HashSet<(u32, u32)> = exclude
        .iter()
        .map(|&(a, b)| normalize_pair(a, b))
        .filter(|&(a, b)| a != b && (b as usize) < nodes && !graph.has_edge(a as usize, b as usize))
        .collect();
    let available = graph.max_edges() - graph.n_edges() - excluded_non_edges.len();
    if n > available {
        return Err(Error::InsufficientNegatives {
            requested: n,
            available,
        });
    }
    let is_candidate = |a: u32, b: u32| {
        a != b && !graph.has_edge(a as usize, b as usize) && !excluded_non_edges.contains(&(a, b))
    };
    let mut rng = rng_from(seed);
    if 2 * n > available {
        // dense request: enumerate all candidates and subsample
        let mut all = Vec::with_capacity(available);
        for a in 0..nodes as u32 {
            for b in a + 1..nodes as u32 {
                if is_candidate(a, b) {
                    all.push((a, b));
                }
            }
        }
        let mut chosen = index::sample(&mut rng, all.len(), n).into_vec();
        chosen.sort_unstable();
        return Ok(chosen.into_iter().map(|i| all[i]).collect());
    }
    let mut seen = HashSet::with_capacity(n);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let a = rng.random_range(0..nodes) as u32;
        let b = rng.random_range(0..nodes) as u32;
        let pair = normalize_pair(a, b);
        if is_candidate(pair.0, pair.1) && seen.insert(pair) {
            out.push(pair);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn path(n: u32) -> SocialGraph {
        SocialGraph::from_edges(n as usize, (0..n - 1).map(|i| (i, i + 1))).unwrap()
    }

    #[test]
    fn negatives_on_empty_graph() {
        let g = SocialGraph::empty(4);
        let pairs = sample_negative_pairs(&g, 3, 1, &HashSet::new()).unwrap();
        assert_eq!(pairs.len(), 3);
        let distinct: HashSet<_> = pairs.iter().collect();
        assert_eq!(distinct.len(), 3);
        assert!(pairs.iter().all(|&(a, b)| a < b));
    }

    #[test]
    fn complete_graph_has_no_negatives() {
        let edges: Vec<(u32, u32)> = (0..5u32).flat_map(|a| (a + 1..5).map(move |b| (a, b))).collect();
        let g = SocialGraph::from_edges(5, edges).unwrap();
        assert!(matches!(
            sample_negative_pairs(&g, 1, 0, &HashSet::new()),
            Err(Error::InsufficientNegatives { .. })
        ));
    }

    #[test]
    fn exclusions_are_respected() {
        let g = path(4);
        // non-edges: (0,2) (0,3) (1,3)
        let exclude: HashSet<_> = [(2, 0), (1, 2)].into_iter().collect();
        let pairs = sample_negative_pairs(&g, 2, 9, &exclude).unwrap();
        let set: HashSet<_> = pairs.into_iter().collect();
        assert_eq!(set, [(0, 3), (1, 3)].into_iter().collect());
        assert!(sample_negative_pairs(&g, 3, 9, &exclude).is_err());
    }

    #[test]
    fn split_bad_arguments() {
        let g = path(10);
        assert!(split_edges(&g, 0.0, 0).is_err());
        assert!(split_edges(&g, 1.0, 0).is_err());
        assert!(split_edges(&path(2), 0.5, 0).is_err());
    }

    #[test]
    fn split_is_deterministic_partition() {
        let g = path(50);
        let a = split_edges(&g, 0.2, 4).unwrap();
        assert_eq!(a, split_edges(&g, 0.2, 4).unwrap());
        assert_eq!(a.heldout_pos.len(), 10);
        assert_eq!(a.heldout_neg.len(), 10);
        assert_eq!(a.train_graph.n_edges() + a.heldout_pos.len(), g.n_edges());
        for &(u, v) in &a.heldout_pos {
            assert!(!a.train_graph.has_edge(u as usize, v as usize));
        }
    }
}
