//! Undirected weighted graphs, the generators used by the experiments, and
//! the normalized Laplacian.
//!
//! A [`Graph`] stores each node's neighbours as a sorted list of
//! `(neighbour, weight)` pairs. Every edge is stored twice with the same
//! weight, so symmetry holds exactly.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{BufRead, Write};

use nalgebra::DMatrix;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    adjacency: Vec<Vec<(usize, f64)>>,
}

impl Graph {
    /// Builds a graph from undirected edges `(i, j, w)`.
    ///
    /// Each edge is inserted in both directions. Repeated edges keep the
    /// largest weight; zero-weight edges are dropped. Self-loops, negative
    /// or non-finite weights and out-of-range indices are rejected.
    pub fn from_edges<I>(n: usize, edges: I) -> Result<Self>
    where
        I: IntoIterator<Item = (usize, usize, f64)>,
    {
        if n == 0 {
            return Err(invalid("graph must have at least one node"));
        }
        let mut rows: Vec<BTreeMap<usize, f64>> = vec![BTreeMap::new(); n];
        for (i, j, w) in edges {
            if i >= n || j >= n {
                return Err(invalid(format!("edge ({i}, {j}) out of range for {n} nodes")));
            }
            if i == j {
                return Err(invalid(format!("self-loop at node {i}")));
            }
            if !w.is_finite() || w < 0.0 {
                return Err(invalid(format!("edge ({i}, {j}) has invalid weight {w}")));
            }
            if w == 0.0 {
                continue;
            }
            for (a, b) in [(i, j), (j, i)] {
                let slot = rows[a].entry(b).or_insert(w);
                if w > *slot {
                    *slot = w;
                }
            }
        }
        Ok(Self {
            adjacency: rows.into_iter().map(|r| r.into_iter().collect()).collect(),
        })
    }

    pub fn n(&self) -> usize {
        self.adjacency.len()
    }

    /// Neighbours of `i` with their weights, sorted by neighbour index.
    pub fn neighbors(&self, i: usize) -> &[(usize, f64)] {
        &self.adjacency[i]
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.adjacency[i]
            .binary_search_by_key(&j, |&(k, _)| k)
            .map(|pos| self.adjacency[i][pos].1)
            .unwrap_or(0.0)
    }

    pub fn degree(&self, i: usize) -> f64 {
        self.adjacency[i].iter().map(|&(_, w)| w).sum()
    }

    pub fn degrees(&self) -> Vec<f64> {
        (0..self.n()).map(|i| self.degree(i)).collect()
    }

    /// Number of undirected edges.
    pub fn edge_count(&self) -> usize {
        self.adjacency.iter().map(Vec::len).sum::<usize>() / 2
    }

    /// Undirected edges `(i, j, w)` with `i < j`, in lexicographic order.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.adjacency
            .iter()
            .enumerate()
            .flat_map(|(i, row)| row.iter().filter(move |&&(j, _)| j > i).map(move |&(j, w)| (i, j, w)))
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.n();
        let mut w = DMatrix::zeros(n, n);
        for (i, row) in self.adjacency.iter().enumerate() {
            for &(j, wij) in row {
                w[(i, j)] = wij;
            }
        }
        w
    }

    /// Serializes as `# nodes <n>` followed by one `i j w` line per edge.
    pub fn to_edge_list(&self) -> String {
        let mut out = format!("# nodes {}\n", self.n());
        for (i, j, w) in self.edges() {
            let _ = writeln!(out, "{i} {j} {w}");
        }
        out
    }

    pub fn write_edge_list<W: Write>(&self, mut sink: W) -> Result<()> {
        sink.write_all(self.to_edge_list().as_bytes())?;
        Ok(())
    }

    pub fn parse_edge_list(text: &str) -> Result<Self> {
        Self::read_edge_list(text.as_bytes())
    }

    /// Reads the format produced by [`Graph::to_edge_list`]. Blank lines and
    /// `#` comments other than the header are ignored.
    pub fn read_edge_list<R: BufRead>(source: R) -> Result<Self> {
        let mut n = None;
        let mut edges = Vec::new();
        for (idx, line) in source.lines().enumerate() {
            let line = line?;
            let lineno = idx + 1;
            let trimmed = line.trim();
            if trimmed.is_empty() {
                continue;
            }
            if let Some(comment) = trimmed.strip_prefix('#') {
                let mut parts = comment.split_whitespace();
                if parts.next() == Some("nodes") {
                    let value = parts.next().ok_or_else(|| parse_err(lineno, "missing node count"))?;
                    n = Some(
                        value
                            .parse::<usize>()
                            .map_err(|e| parse_err(lineno, format!("bad node count: {e}")))?,
                    );
                }
                continue;
            }
            let fields: Vec<&str> = trimmed.split_whitespace().collect();
            if fields.len() != 3 {
                return Err(parse_err(lineno, "expected `i j w`"));
            }
            let i = fields[0]
                .parse::<usize>()
                .map_err(|e| parse_err(lineno, format!("bad index: {e}")))?;
            let j = fields[1]
                .parse::<usize>()
                .map_err(|e| parse_err(lineno, format!("bad index: {e}")))?;
            let w = fields[2]
                .parse::<f64>()
                .map_err(|e| parse_err(lineno, format!("bad weight: {e}")))?;
            edges.push((i, j, w));
        }
        let n = n.ok_or_else(|| parse_err(1, "missing `# nodes <n>` header"))?;
        Self::from_edges(n, edges)
    }
}

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

fn check_probability(name: &str, p: f64) -> Result<()> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(invalid(format!("{name} must lie in (0, 1], got {p}")));
    }
    Ok(())
}

/// Stochastic block graph with unit weights.
///
/// Pairs inside a community are joined with probability `p_intra`, pairs in
/// different communities with `p_inter`. A node left isolated is joined to a
/// uniformly chosen node of its own community (or of the whole graph when
/// its community is a singleton).
pub fn build_community_graph(community_sizes: &[usize], p_intra: f64, p_inter: f64, seed: u64) -> Result<Graph> {
    if community_sizes.is_empty() {
        return Err(invalid("community size list is empty"));
    }
    if community_sizes.contains(&0) {
        return Err(invalid("community sizes must be positive"));
    }
    check_probability("p_intra", p_intra)?;
    check_probability("p_inter", p_inter)?;
    if p_intra <= p_inter {
        return Err(invalid(format!("p_intra ({p_intra}) must exceed p_inter ({p_inter})")));
    }

    let n: usize = community_sizes.iter().sum();
    let label: Vec<usize> = community_sizes
        .iter()
        .enumerate()
        .flat_map(|(c, &size)| std::iter::repeat_n(c, size))
        .collect();
    let members: Vec<Vec<usize>> = {
        let mut m = vec![Vec::new(); community_sizes.len()];
        for (i, &c) in label.iter().enumerate() {
            m[c].push(i);
        }
        m
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut edges = Vec::new();
    let mut has_edge = vec![false; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let p = if label[i] == label[j] { p_intra } else { p_inter };
            if rng.random::<f64>() < p {
                edges.push((i, j, 1.0));
                has_edge[i] = true;
                has_edge[j] = true;
            }
        }
    }

    for i in 0..n {
        if has_edge[i] {
            continue;
        }
        let own = &members[label[i]];
        let j = if own.len() > 1 {
            loop {
                let &j = own.choose(&mut rng).expect("non-empty community");
                if j != i {
                    break j;
                }
            }
        } else if n > 1 {
            loop {
                let j = rng.random_range(0..n);
                if j != i {
                    break j;
                }
            }
        } else {
            return Err(invalid("a single-node graph cannot have positive degree"));
        };
        edges.push((i.min(j), i.max(j), 1.0));
        has_edge[i] = true;
        has_edge[j] = true;
    }

    Graph::from_edges(n, edges)
}

pub fn build_path_graph(n: usize) -> Result<Graph> {
    if n < 2 {
        return Err(invalid(format!("path graph needs n >= 2, got {n}")));
    }
    Graph::from_edges(n, (0..n - 1).map(|i| (i, i + 1, 1.0)))
}

pub fn build_ring_graph(n: usize) -> Result<Graph> {
    if n < 3 {
        return Err(invalid(format!("ring graph needs n >= 3, got {n}")));
    }
    Graph::from_edges(n, (0..n).map(|i| (i, (i + 1) % n, 1.0)))
}

/// Random geometric k-nearest-neighbour graph on `n` uniform points in the
/// unit square. Edges are the union of each point's `neighbors` nearest
/// points, all with weight one.
pub fn build_sensor_graph(n: usize, neighbors: usize, seed: u64) -> Result<Graph> {
    if neighbors == 0 || neighbors >= n {
        return Err(invalid(format!(
            "neighbors must satisfy 1 <= neighbors < n, got {neighbors} with n = {n}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points: Vec<[f64; 2]> = (0..n).map(|_| [rng.random(), rng.random()]).collect();
    let edges: Vec<(usize, usize, f64)> = (0..n)
        .into_par_iter()
        .flat_map_iter(|i| {
            let dist = |j: usize| {
                let dx = points[i][0] - points[j][0];
                let dy = points[i][1] - points[j][1];
                dx * dx + dy * dy
            };
            nearest(n, i, neighbors, dist)
                .into_iter()
                .map(move |(j, _)| (i, j, 1.0))
        })
        .collect();
    Graph::from_edges(n, edges)
}

/// The `count` nearest nodes to `i` under `dist`, ties broken by index.
fn nearest(n: usize, i: usize, count: usize, dist: impl Fn(usize) -> f64) -> Vec<(usize, f64)> {
    let mut cand: Vec<(usize, f64)> = (0..n).filter(|&j| j != i).map(|j| (j, dist(j))).collect();
    cand.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    cand.truncate(count);
    cand
}

/// Disjoint union of complete graphs. Every component is regular, which
/// makes its optimal sampling probabilities available in closed form.
pub fn build_disconnected_regular(component_sizes: &[usize]) -> Result<Graph> {
    if component_sizes.is_empty() {
        return Err(invalid("component size list is empty"));
    }
    if let Some(&bad) = component_sizes.iter().find(|&&s| s < 2) {
        return Err(invalid(format!("component sizes must be >= 2, got {bad}")));
    }
    let n = component_sizes.iter().sum();
    let mut edges = Vec::new();
    let mut offset = 0;
    for &size in component_sizes {
        for a in offset..offset + size {
            for b in (a + 1)..offset + size {
                edges.push((a, b, 1.0));
            }
        }
        offset += size;
    }
    Graph::from_edges(n, edges)
}

/// k-nearest-neighbour graph over the columns of a `d x n` feature matrix
/// with Gaussian weights `exp(-|x_i - x_j|^2 / (2 s^2))`.
///
/// `s` is the (population) standard deviation of the directed
/// neighbour distances. The directed weights are symmetrized by taking the
/// maximum.
pub fn build_knn_feature_graph(features: &DMatrix<f64>, neighbors: usize) -> Result<Graph> {
    let n = features.ncols();
    if neighbors == 0 || n < neighbors + 1 {
        return Err(invalid(format!(
            "need at least neighbors + 1 columns, got {n} columns for {neighbors} neighbours"
        )));
    }
    if features.iter().any(|v| !v.is_finite()) {
        return Err(invalid("feature matrix contains non-finite entries"));
    }
    let directed: Vec<(usize, usize, f64)> = (0..n)
        .into_par_iter()
        .flat_map_iter(|i| {
            let xi = features.column(i);
            let dist = |j: usize| (xi - features.column(j)).norm();
            nearest(n, i, neighbors, dist).into_iter().map(move |(j, d)| (i, j, d))
        })
        .collect();

    let count = directed.len() as f64;
    let mean = directed.iter().map(|e| e.2).sum::<f64>() / count;
    let var = directed.iter().map(|e| (e.2 - mean).powi(2)).sum::<f64>() / count;
    let sigma = var.sqrt();
    if !(sigma > 0.0) {
        return Err(invalid(
            "neighbour distances have zero spread; Gaussian bandwidth is undefined",
        ));
    }
    let two_s2 = 2.0 * sigma * sigma;
    // Floor at the smallest positive float so an underflowed weight still
    // keeps its edge.
    let weighted = directed
        .into_iter()
        .map(|(i, j, d)| (i, j, (-(d * d) / two_s2).exp().max(f64::MIN_POSITIVE)));
    Graph::from_edges(n, weighted)
}

/// `I - D^{-1/2} W D^{-1/2}` as a dense symmetric matrix.
pub fn normalized_laplacian(g: &Graph) -> Result<DMatrix<f64>> {
    let n = g.n();
    let mut inv_sqrt = Vec::with_capacity(n);
    for i in 0..n {
        let d = g.degree(i);
        if d <= 0.0 {
            return Err(Error::ZeroDegree { node: i });
        }
        inv_sqrt.push(1.0 / d.sqrt());
    }
    let mut l = DMatrix::identity(n, n);
    for i in 0..n {
        for &(j, w) in g.neighbors(i) {
            l[(i, j)] = -w * (inv_sqrt[i] * inv_sqrt[j]);
        }
    }
    Ok(l)
}
