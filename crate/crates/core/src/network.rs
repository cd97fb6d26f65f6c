//! Undirected communication graphs and neighbourhood averaging.

use std::collections::{BTreeSet, VecDeque};

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{check_len, Error, Result};

const REGULAR_RESAMPLES: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GraphKind {
    Complete,
    Cycle,
    Path,
    RandomRegular { degree: usize, seed: u64 },
}

/// Simple undirected graph on nodes `0..N`. No self loops.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CommGraph {
    neighbors: Vec<BTreeSet<usize>>,
}

impl CommGraph {
    pub fn from_edges(num_nodes: usize, edges: &[(usize, usize)]) -> Result<Self> {
        if num_nodes == 0 {
            return Err(Error::Graph("graph needs at least one node".into()));
        }
        let mut neighbors = vec![BTreeSet::new(); num_nodes];
        for &(i, j) in edges {
            if i >= num_nodes || j >= num_nodes {
                return Err(Error::Graph(format!("edge ({i}, {j}) out of range for {num_nodes} nodes")));
            }
            if i == j {
                return Err(Error::Graph(format!("self loop at node {i}")));
            }
            neighbors[i].insert(j);
            neighbors[j].insert(i);
        }
        Ok(Self { neighbors })
    }

    pub fn num_nodes(&self) -> usize {
        self.neighbors.len()
    }

    pub fn neighbors(&self, i: usize) -> &BTreeSet<usize> {
        &self.neighbors[i]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.neighbors[i].len()
    }

    /// Edges `(i, j)` with `i < j`, in lexicographic order.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        self.neighbors
            .iter()
            .enumerate()
            .flat_map(|(i, nb)| nb.range(i + 1..).map(move |&j| (i, j)))
            .collect()
    }

    pub fn is_regular(&self) -> bool {
        let d = self.degree(0);
        (1..self.num_nodes()).all(|i| self.degree(i) == d)
    }

    pub fn is_connected(&self) -> bool {
        let mut seen = vec![false; self.num_nodes()];
        let mut queue = VecDeque::from([0]);
        seen[0] = true;
        while let Some(i) = queue.pop_front() {
            for &j in &self.neighbors[i] {
                if !seen[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }

    pub fn degree_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.num_nodes(), self.num_nodes(), |i, j| {
            if i == j {
                self.degree(i) as f64
            } else {
                0.0
            }
        })
    }

    pub fn adjacency_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.num_nodes(), self.num_nodes(), |i, j| {
            if self.neighbors[i].contains(&j) {
                1.0
            } else {
                0.0
            }
        })
    }

    /// `L = D − E`.
    pub fn laplacian(&self) -> DMatrix<f64> {
        self.degree_matrix() - self.adjacency_matrix()
    }

    /// `W = (I + D)⁻¹(I + E)`.
    pub fn mixing_matrix(&self) -> DMatrix<f64> {
        let n = self.num_nodes();
        DMatrix::from_fn(n, n, |i, j| {
            if i == j || self.neighbors[i].contains(&j) {
                1.0 / (self.degree(i) + 1) as f64
            } else {
                0.0
            }
        })
    }
}

/// `(W ⊗ I_n) v`: every node averages its own block with its neighbours'.
pub fn mix(v: &DVector<f64>, graph: &CommGraph, n: usize) -> Result<DVector<f64>> {
    check_len("stacked estimates", graph.num_nodes() * n, v.len())?;
    let mut out = DVector::zeros(v.len());
    for i in 0..graph.num_nodes() {
        let mut acc = v.rows(i * n, n).into_owned();
        for &j in graph.neighbors(i) {
            acc += v.rows(j * n, n);
        }
        out.rows_mut(i * n, n).copy_from(&(acc / (graph.degree(i) + 1) as f64));
    }
    Ok(out)
}

/// `(M ⊗ I_n) v` for an `N × N` matrix `M`, blockwise.
pub(crate) fn kron_apply(m: &DMatrix<f64>, v: &DVector<f64>, n: usize) -> DVector<f64> {
    let big_n = m.nrows();
    let mut out = DVector::zeros(big_n * n);
    for i in 0..big_n {
        for j in 0..big_n {
            let w = m[(i, j)];
            if w != 0.0 {
                for k in 0..n {
                    out[i * n + k] += w * v[j * n + k];
                }
            }
        }
    }
    out
}

pub fn build_graph(kind: GraphKind, num_nodes: usize) -> Result<CommGraph> {
    if num_nodes == 0 {
        return Err(Error::Graph("graph needs at least one node".into()));
    }
    let edges: Vec<(usize, usize)> = match kind {
        GraphKind::Complete => (0..num_nodes)
            .flat_map(|i| (i + 1..num_nodes).map(move |j| (i, j)))
            .collect(),
        GraphKind::Path => (1..num_nodes).map(|i| (i - 1, i)).collect(),
        GraphKind::Cycle => {
            if num_nodes < 3 {
                return Err(Error::Graph(format!("a cycle needs at least 3 nodes, got {num_nodes}")));
            }
            (0..num_nodes).map(|i| (i, (i + 1) % num_nodes)).collect()
        }
        GraphKind::RandomRegular { degree, seed } => return random_regular(num_nodes, degree, seed),
    };
    CommGraph::from_edges(num_nodes, &edges)
}

/// Pairing-model sampler, restarted until the result is simple and
/// connected.
fn random_regular(num_nodes: usize, degree: usize, seed: u64) -> Result<CommGraph> {
    if degree == 0 || degree >= num_nodes || !(degree * num_nodes).is_multiple_of(2) {
        return Err(Error::Graph(format!(
            "no connected {degree}-regular graph on {num_nodes} nodes (need 0 < d < N and d·N even)"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stubs: Vec<usize> = (0..num_nodes).flat_map(|i| std::iter::repeat_n(i, degree)).collect();
    for _ in 0..REGULAR_RESAMPLES {
        stubs.shuffle(&mut rng);
        let mut seen = BTreeSet::new();
        let simple = stubs.chunks(2).all(|p| {
            let (i, j) = (p[0].min(p[1]), p[0].max(p[1]));
            i != j && seen.insert((i, j))
        });
        if !simple {
            continue;
        }
        let edges: Vec<_> = seen.into_iter().collect();
        let graph = CommGraph::from_edges(num_nodes, &edges)?;
        if graph.is_connected() {
            return Ok(graph);
        }
    }
    Err(Error::Graph(format!(
        "failed to sample a connected {degree}-regular graph on {num_nodes} nodes after {REGULAR_RESAMPLES} attempts"
    )))
}
