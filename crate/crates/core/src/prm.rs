//! Probabilistic roadmap over the unit square: uniform node sampling,
//! symmetrized k-nearest-neighbor edges, single-target geodesics, and the
//! budget feasibility mask that keeps the destination reachable.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed;

#[derive(Debug, Error, PartialEq)]
pub enum PrmError {
    #[error("failed to sample a connected roadmap after {attempts} attempts")]
    Construction { attempts: usize },
    #[error("need n_nodes >= k+1 (got n_nodes={n_nodes}, k={k})")]
    TooFewNodes { n_nodes: usize, k: usize },
    #[error("node index {0} out of range")]
    BadNode(usize),
    #[error(
        "budget invariant violated at node {node}: remaining {remaining} < geodesic {geodesic}"
    )]
    BudgetInvariant {
        node: usize,
        remaining: f64,
        geodesic: f64,
    },
}

/// Roadmap graph. Neighbor lists are sorted ascending by node index and the
/// adjacency is symmetric (union of the k-NN relation).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrmGraph {
    pub positions: Vec<[f64; 2]>,
    pub neighbors: Vec<Vec<usize>>,
    /// Edge lengths parallel to `neighbors`.
    pub lengths: Vec<Vec<f64>>,
}

impl PrmGraph {
    pub fn n_nodes(&self) -> usize {
        self.positions.len()
    }

    /// Euclidean length of edge (i, j); `None` when the edge is absent.
    pub fn edge_length(&self, i: usize, j: usize) -> Option<f64> {
        let slot = self.neighbors[i].binary_search(&j).ok()?;
        Some(self.lengths[i][slot])
    }
}

/// Shortest-path distances from every node to one destination.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeodesicTable {
    pub dest: usize,
    pub dist: Vec<f64>,
}

fn euclid(a: [f64; 2], b: [f64; 2]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    (dx * dx + dy * dy).sqrt()
}

/// Samples `n_nodes` uniform positions and links each to its `k` nearest
/// neighbors (ties broken by lower index), then symmetrizes by union.
/// Disconnected samples are rejected and retried with `seed+1`.
pub fn build_prm(seed: u64, n_nodes: usize, k: usize) -> Result<PrmGraph, PrmError> {
    if n_nodes < k + 1 {
        return Err(PrmError::TooFewNodes { n_nodes, k });
    }
    const MAX_ATTEMPTS: usize = 100;
    for attempt in 0..MAX_ATTEMPTS {
        let g = sample_graph(seed.wrapping_add(attempt as u64), n_nodes, k);
        if connected(&g) {
            return Ok(g);
        }
    }
    Err(PrmError::Construction {
        attempts: MAX_ATTEMPTS,
    })
}

fn sample_graph(seed: u64, n_nodes: usize, k: usize) -> PrmGraph {
    let mut rng = seed::rng_from(seed);
    let positions: Vec<[f64; 2]> = (0..n_nodes)
        .map(|_| [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)])
        .collect();

    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n_nodes];
    let mut scratch: Vec<(f64, usize)> = Vec::with_capacity(n_nodes - 1);
    for i in 0..n_nodes {
        scratch.clear();
        for j in 0..n_nodes {
            if j != i {
                scratch.push((euclid(positions[i], positions[j]), j));
            }
        }
        scratch.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for &(_, j) in scratch.iter().take(k) {
            adj[i].push(j);
        }
    }

    // Union symmetrization: j in nbr(i) <=> i in nbr(j).
    let mut sym: Vec<Vec<usize>> = vec![Vec::new(); n_nodes];
    for (i, nbrs) in adj.iter().enumerate() {
        for &j in nbrs {
            sym[i].push(j);
            sym[j].push(i);
        }
    }
    let mut neighbors = Vec::with_capacity(n_nodes);
    let mut lengths = Vec::with_capacity(n_nodes);
    for (i, mut nbrs) in sym.into_iter().enumerate() {
        nbrs.sort_unstable();
        nbrs.dedup();
        let lens: Vec<f64> = nbrs.iter().map(|&j| euclid(positions[i], positions[j])).collect();
        neighbors.push(nbrs);
        lengths.push(lens);
    }
    PrmGraph {
        positions,
        neighbors,
        lengths,
    }
}

fn connected(g: &PrmGraph) -> bool {
    let n = g.n_nodes();
    let mut seen = vec![false; n];
    let mut stack = vec![0usize];
    seen[0] = true;
    let mut count = 1;
    while let Some(i) = stack.pop() {
        for &j in &g.neighbors[i] {
            if !seen[j] {
                seen[j] = true;
                count += 1;
                stack.push(j);
            }
        }
    }
    count == n
}

#[derive(Copy, Clone, PartialEq)]
struct HeapEntry {
    cost: f64,
    node: usize,
}

impl Eq for HeapEntry {}

impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> Ordering {
        // Reversed: BinaryHeap is a max-heap, we want the cheapest entry.
        other
            .cost
            .total_cmp(&self.cost)
            .then(other.node.cmp(&self.node))
    }
}

impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Exact single-target shortest-path distances (Dijkstra over edge lengths).
pub fn shortest_dists(g: &PrmGraph, dest: usize) -> Result<GeodesicTable, PrmError> {
    if dest >= g.n_nodes() {
        return Err(PrmError::BadNode(dest));
    }
    let mut dist = vec![f64::INFINITY; g.n_nodes()];
    dist[dest] = 0.0;
    let mut heap = BinaryHeap::new();
    heap.push(HeapEntry {
        cost: 0.0,
        node: dest,
    });
    while let Some(HeapEntry { cost, node }) = heap.pop() {
        if cost > dist[node] {
            continue;
        }
        for (slot, &j) in g.neighbors[node].iter().enumerate() {
            let next = cost + g.lengths[node][slot];
            if next < dist[j] {
                dist[j] = next;
                heap.push(HeapEntry { cost: next, node: j });
            }
        }
    }
    Ok(GeodesicTable { dest, dist })
}

/// Feasibility mask over the neighbors of `current`: entry `m` is true when
/// moving to `neighbors[current][m]` still allows reaching the destination
/// within `remaining_budget`.
///
/// Whenever `remaining_budget >= geo.dist[current]` and `current != dest`, at
/// least one entry is true: the successor on a shortest path to the
/// destination always qualifies (its relaxation produced `dist[current]`, so
/// the comparison holds exactly, with no tolerance).
pub fn budget_mask(
    g: &PrmGraph,
    geo: &GeodesicTable,
    current: usize,
    remaining_budget: f64,
) -> Result<Vec<bool>, PrmError> {
    if current >= g.n_nodes() {
        return Err(PrmError::BadNode(current));
    }
    if remaining_budget < geo.dist[current] {
        return Err(PrmError::BudgetInvariant {
            node: current,
            remaining: remaining_budget,
            geodesic: geo.dist[current],
        });
    }
    Ok(g.neighbors[current]
        .iter()
        .zip(&g.lengths[current])
        .map(|(&j, &len)| len + geo.dist[j] <= remaining_budget)
        .collect())
}
