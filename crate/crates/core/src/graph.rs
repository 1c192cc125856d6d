//! Undirected social graph with compressed neighbor lists.

use std::collections::BTreeSet;
use std::sync::Arc;

use crate::error::{Error, Result};

/// Directed view of an undirected graph: every edge {u,v} appears as u→v and
/// v→u. Edges are grouped by source, neighbors ascending.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Csr {
    pub offsets: Vec<usize>,
    pub targets: Vec<usize>,
    pub sources: Vec<usize>,
    /// Index of the opposite directed edge, `usize::MAX` if absent.
    pub reverse: Vec<usize>,
}

impl Csr {
    pub fn n_nodes(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn n_directed(&self) -> usize {
        self.targets.len()
    }

    pub fn neighbors(&self, u: usize) -> &[usize] {
        &self.targets[self.offsets[u]..self.offsets[u + 1]]
    }

    pub fn edge_range(&self, u: usize) -> std::ops::Range<usize> {
        self.offsets[u]..self.offsets[u + 1]
    }

    pub fn degree(&self, u: usize) -> usize {
        self.offsets[u + 1] - self.offsets[u]
    }

    fn from_lists(lists: &[Vec<usize>]) -> Self {
        let mut offsets = Vec::with_capacity(lists.len() + 1);
        offsets.push(0);
        let mut targets = Vec::new();
        let mut sources = Vec::new();
        for (u, l) in lists.iter().enumerate() {
            targets.extend_from_slice(l);
            sources.extend(std::iter::repeat_n(u, l.len()));
            offsets.push(targets.len());
        }
        let reverse = (0..targets.len())
            .map(|e| {
                let (u, v) = (sources[e], targets[e]);
                if v >= lists.len() {
                    return usize::MAX;
                }
                let range = offsets[v]..offsets[v + 1];
                match targets[range.clone()].binary_search(&u) {
                    Ok(i) => range.start + i,
                    Err(_) => usize::MAX,
                }
            })
            .collect();
        Csr {
            offsets,
            targets,
            sources,
            reverse,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SocialGraph {
    n_nodes: usize,
    /// Unordered pairs stored as (u, v) with u < v, sorted.
    edges: Vec<(u32, u32)>,
    csr: Arc<Csr>,
}

impl SocialGraph {
    pub fn empty(n_nodes: usize) -> Self {
        Self::from_edges(n_nodes, std::iter::empty()).expect("empty graph is valid")
    }

    /// Build from unordered pairs. Self-loops, duplicates (in either
    /// orientation) and out-of-range endpoints are rejected.
    pub fn from_edges<I>(n_nodes: usize, edges: I) -> Result<Self>
    where
        I: IntoIterator<Item = (u32, u32)>,
    {
        let mut set = BTreeSet::new();
        for (a, b) in edges {
            if a == b {
                return Err(Error::InvalidArgument(format!("self-loop on node {a}")));
            }
            if a as usize >= n_nodes || b as usize >= n_nodes {
                return Err(Error::InvalidArgument(format!(
                    "edge ({a},{b}) out of range for {n_nodes} nodes"
                )));
            }
            if !set.insert((a.min(b), a.max(b))) {
                return Err(Error::InvalidArgument(format!("duplicate edge ({a},{b})")));
            }
        }
        let edges: Vec<(u32, u32)> = set.into_iter().collect();
        let mut lists = vec![Vec::new(); n_nodes];
        for &(u, v) in &edges {
            lists[u as usize].push(v as usize);
            lists[v as usize].push(u as usize);
        }
        lists.iter_mut().for_each(|l| l.sort_unstable());
        Ok(SocialGraph {
            n_nodes,
            edges,
            csr: Arc::new(Csr::from_lists(&lists)),
        })
    }

    /// Assemble a graph without any checks. Only meant for exercising the
    /// validator with deliberately broken data.
    pub fn from_raw_parts(n_nodes: usize, edges: Vec<(u32, u32)>, adjacency: Vec<Vec<usize>>) -> Self {
        SocialGraph {
            n_nodes,
            edges,
            csr: Arc::new(Csr::from_lists(&adjacency)),
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[(u32, u32)] {
        &self.edges
    }

    pub fn csr(&self) -> &Arc<Csr> {
        &self.csr
    }

    pub fn neighbors(&self, u: usize) -> &[usize] {
        self.csr.neighbors(u)
    }

    pub fn degree(&self, u: usize) -> usize {
        self.csr.degree(u)
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        u < self.n_nodes && self.csr.neighbors(u).binary_search(&v).is_ok()
    }

    /// Graph with the given unordered pairs removed.
    pub fn without_edges(&self, removed: &[(u32, u32)]) -> Self {
        let drop: BTreeSet<(u32, u32)> = removed.iter().map(|&(a, b)| (a.min(b), a.max(b))).collect();
        Self::from_edges(
            self.n_nodes,
            self.edges.iter().copied().filter(|e| !drop.contains(e)),
        )
        .expect("subset of a valid edge set is valid")
    }

    /// Relabel nodes: node `i` becomes `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self::from_edges(
            self.n_nodes,
            self.edges
                .iter()
                .map(|&(u, v)| (perm[u as usize] as u32, perm[v as usize] as u32)),
        )
        .expect("permutation preserves validity")
    }

    pub fn max_edges(&self) -> usize {
        self.n_nodes * self.n_nodes.saturating_sub(1) / 2
    }
}

pub fn normalize_pair(u: u32, v: u32) -> (u32, u32) {
    (u.min(v), u.max(v))
}
