//! Sensor graphs and the cross-time adjacencies used by local attention.
//!
//! Cross-time matrices index rows as `t * N + n`: block `(t, t')` of the
//! `(N*T) x (N*T)` matrix relates snapshot `t` to snapshot `t'`.

use std::collections::{BTreeSet, VecDeque};
use std::path::Path;
use std::sync::Arc;

use rand::Rng;

use crate::error::{io_err, Error, Result};
use crate::ndtensor::{SparsePattern, Tensor};

/// Undirected sensor graph with a symmetric, zero-diagonal binary adjacency.
#[derive(Clone, Debug, PartialEq)]
pub struct SensorGraph {
    node_count: usize,
    /// Canonical undirected edges `(i, j)` with `i < j`, sorted.
    edges: Vec<(usize, usize)>,
    adjacency: Arc<SparsePattern>,
}

impl SensorGraph {
    /// Symmetrizes, drops self-loops and duplicates.
    pub fn new(node_count: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let mut set = BTreeSet::new();
        for (a, b) in edges {
            if a >= node_count || b >= node_count {
                return Err(Error::Graph(format!(
                    "edge ({a}, {b}) outside node range 0..{node_count}"
                )));
            }
            if a != b {
                set.insert((a.min(b), a.max(b)));
            }
        }
        let edges: Vec<_> = set.into_iter().collect();
        let pairs = edges.iter().flat_map(|&(a, b)| [(a, b), (b, a)]);
        let adjacency = Arc::new(SparsePattern::from_pairs(node_count, node_count, pairs)?);
        Ok(Self {
            node_count,
            edges,
            adjacency,
        })
    }

    /// Parses an edge list: one `src,dst` pair per line, 0-based, `#` comments.
    pub fn parse(text: &str, node_count: usize) -> Result<Self> {
        let mut edges = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = || Error::Graph(format!("line {}: malformed edge {raw:?}", lineno + 1));
            let (a, b) = line.split_once(',').ok_or_else(bad)?;
            let a: usize = a.trim().parse().map_err(|_| bad())?;
            let b: usize = b.trim().parse().map_err(|_| bad())?;
            if a >= node_count || b >= node_count {
                return Err(Error::Graph(format!(
                    "line {}: node index out of range 0..{node_count} in {raw:?}",
                    lineno + 1
                )));
            }
            edges.push((a, b));
        }
        Self::new(node_count, edges)
    }

    pub fn load(path: &Path, node_count: usize) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::parse(&text, node_count)
    }

    pub fn to_edge_list(&self) -> String {
        let mut out = String::from("# src,dst\n");
        for (a, b) in &self.edges {
            out.push_str(&format!("{a},{b}\n"));
        }
        out
    }

    pub fn path(n: usize) -> Self {
        Self::new(n, (1..n).map(|i| (i - 1, i))).expect("path edges in range")
    }

    /// Row-major grid with `ceil(sqrt(n))` columns, truncated to `n` nodes.
    pub fn grid(n: usize) -> Self {
        let cols = (n as f64).sqrt().ceil().max(1.0) as usize;
        let mut edges = Vec::new();
        for i in 0..n {
            if (i + 1) % cols != 0 && i + 1 < n {
                edges.push((i, i + 1));
            }
            if i + cols < n {
                edges.push((i, i + cols));
            }
        }
        Self::new(n, edges).expect("grid edges in range")
    }

    /// Erdos-Renyi graph: each unordered pair present with probability `p`.
    pub fn random(n: usize, p: f64, rng: &mut impl Rng) -> Self {
        let mut edges = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                if rng.random::<f64>() < p {
                    edges.push((i, j));
                }
            }
        }
        Self::new(n, edges).expect("random edges in range")
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    /// Number of undirected edges.
    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn adjacency(&self) -> &Arc<SparsePattern> {
        &self.adjacency
    }

    pub fn dense_adjacency(&self) -> Tensor {
        self.adjacency.to_dense()
    }

    pub fn neighbours(&self, node: usize) -> &[usize] {
        self.adjacency.row(node)
    }

    /// Graph with node `i` renamed to `perm[i]`.
    pub fn relabeled(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.node_count {
            return Err(Error::Graph("permutation length differs from node count".into()));
        }
        Self::new(
            self.node_count,
            self.edges.iter().map(|&(a, b)| (perm[a], perm[b])),
        )
    }
}

/// Block adjacency over `steps` stacked snapshots of a sensor graph.
#[derive(Clone, Debug)]
pub struct CrossTimeAdjacency {
    nodes: usize,
    steps: usize,
    span: usize,
    pattern: Arc<SparsePattern>,
}

impl CrossTimeAdjacency {
    pub fn nodes(&self) -> usize {
        self.nodes
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn span(&self) -> usize {
        self.span
    }

    /// Number of cross-time rows, `N * steps`.
    pub fn size(&self) -> usize {
        self.nodes * self.steps
    }

    pub fn nnz(&self) -> usize {
        self.pattern.nnz()
    }

    pub fn pattern(&self) -> &Arc<SparsePattern> {
        &self.pattern
    }

    pub fn to_dense(&self) -> Tensor {
        self.pattern.to_dense()
    }
}

fn check_steps(steps: usize) -> Result<()> {
    if steps == 0 {
        return Err(Error::Graph("cross-time adjacency needs at least one step".into()));
    }
    Ok(())
}

fn block_pairs(
    diag: &SparsePattern,
    cross: &SparsePattern,
    steps: usize,
    span: usize,
) -> Vec<(usize, usize)> {
    let n = diag.rows();
    let mut pairs = Vec::new();
    for t in 0..steps {
        pairs.extend(diag.pairs().map(|(i, j)| (t * n + i, t * n + j)));
        for u in 0..steps {
            let d = t.abs_diff(u);
            if d >= 1 && d <= span {
                pairs.extend(cross.pairs().map(|(i, j)| (t * n + i, u * n + j)));
            }
        }
    }
    pairs
}

/// Hierarchical cross-time adjacency: `A` on diagonal blocks and the identity
/// on blocks whose time distance is between 1 and `span`.
pub fn build_rct_adjacency(g: &SensorGraph, steps: usize, span: usize) -> Result<CrossTimeAdjacency> {
    check_steps(steps)?;
    let n = g.node_count();
    let identity = SparsePattern::from_pairs(n, n, (0..n).map(|i| (i, i)))?;
    let pairs = block_pairs(g.adjacency(), &identity, steps, span);
    Ok(CrossTimeAdjacency {
        nodes: n,
        steps,
        span,
        pattern: Arc::new(SparsePattern::from_pairs(n * steps, n * steps, pairs)?),
    })
}

/// Flat two-hop cross-time adjacency: `bin(A + A^2)` on diagonal blocks and
/// `bin(I + A)` on blocks within `span`.
pub fn build_sim_adjacency(g: &SensorGraph, steps: usize, span: usize) -> Result<CrossTimeAdjacency> {
    check_steps(steps)?;
    let n = g.node_count();
    let a = g.adjacency();
    let mut two_hop = Vec::new();
    for i in 0..n {
        for &j in a.row(i) {
            two_hop.push((i, j));
            two_hop.extend(a.row(j).iter().map(|&k| (i, k)));
        }
    }
    let diag = SparsePattern::from_pairs(n, n, two_hop)?;
    let cross = SparsePattern::from_pairs(n, n, (0..n).map(|i| (i, i)).chain(a.pairs()))?;
    let pairs = block_pairs(&diag, &cross, steps, span);
    Ok(CrossTimeAdjacency {
        nodes: n,
        steps,
        span,
        pattern: Arc::new(SparsePattern::from_pairs(n * steps, n * steps, pairs)?),
    })
}

/// Closed-form nonzero count of [`build_rct_adjacency`].
pub fn rct_nnz(undirected_edges: usize, nodes: usize, steps: usize, span: usize) -> usize {
    let cross: usize = (1..=span.min(steps.saturating_sub(1)))
        .map(|d| (steps - d) * nodes)
        .sum();
    steps * 2 * undirected_edges + 2 * cross
}

/// Binary matrix with `(i, j) = 1` iff `j` is reachable from `i` within `k`
/// hops, by breadth-first search.
pub fn k_hop_reachability(pattern: &SparsePattern, k: usize) -> Tensor {
    let n = pattern.rows();
    let mut out = Tensor::zeros(&[n, n]);
    let mut dist = vec![usize::MAX; n];
    let mut queue = VecDeque::new();
    for src in 0..n {
        dist.iter_mut().for_each(|d| *d = usize::MAX);
        dist[src] = 0;
        queue.clear();
        queue.push_back(src);
        while let Some(u) = queue.pop_front() {
            out.set(&[src, u], 1.0);
            if dist[u] == k {
                continue;
            }
            for &v in pattern.row(u) {
                if dist[v] == usize::MAX {
                    dist[v] = dist[u] + 1;
                    queue.push_back(v);
                }
            }
        }
    }
    out
}
