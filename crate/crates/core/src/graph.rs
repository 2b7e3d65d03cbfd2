//! Communication graph and doubly stochastic mixing weights.
//!
//! Agents are indexed `0..n`. A [`Graph`] is validated once at construction
//! (undirected, loop-free, connected) and is immutable afterwards, so every
//! algorithm downstream can take connectivity for granted.

use std::collections::{BTreeSet, VecDeque};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Graph {
    n: usize,
    edges: Vec<(usize, usize)>,
    neighbors: Vec<Vec<usize>>,
}

impl Graph {
    pub fn new(n: usize, edge_list: &[(usize, usize)]) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidParameter(
                "graph needs at least one agent".into(),
            ));
        }
        let mut seen = BTreeSet::new();
        let mut neighbors = vec![Vec::new(); n];
        for &(a, b) in edge_list {
            if a >= n || b >= n {
                return Err(Error::InvalidEdge {
                    from: a,
                    to: b,
                    reason: "endpoint out of range",
                });
            }
            if a == b {
                return Err(Error::InvalidEdge {
                    from: a,
                    to: b,
                    reason: "self-loop",
                });
            }
            let key = (a.min(b), a.max(b));
            if !seen.insert(key) {
                return Err(Error::InvalidEdge {
                    from: a,
                    to: b,
                    reason: "duplicate edge",
                });
            }
            neighbors[a].push(b);
            neighbors[b].push(a);
        }
        for list in &mut neighbors {
            list.sort_unstable();
        }
        let graph = Graph {
            n,
            edges: seen.into_iter().collect(),
            neighbors,
        };
        let components = graph.component_count();
        if components > 1 {
            return Err(Error::DisconnectedGraph { components });
        }
        Ok(graph)
    }

    pub fn complete(n: usize) -> Result<Self> {
        let edges: Vec<_> = (0..n)
            .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
            .collect();
        Graph::new(n, &edges)
    }

    pub fn ring(n: usize) -> Result<Self> {
        match n {
            0 | 1 => Graph::new(n, &[]),
            2 => Graph::new(2, &[(0, 1)]),
            _ => {
                let edges: Vec<_> = (0..n).map(|i| (i, (i + 1) % n)).collect();
                Graph::new(n, &edges)
            }
        }
    }

    pub fn path(n: usize) -> Result<Self> {
        let edges: Vec<_> = (1..n).map(|i| (i - 1, i)).collect();
        Graph::new(n, &edges)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Normalized `(min, max)` pairs in lexicographic order.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.neighbors[i].len()
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.neighbors[i].binary_search(&j).is_ok()
    }

    /// Subgraph on `keep` (ascending original indices), renumbered `0..keep.len()`.
    pub fn induced(&self, keep: &[usize]) -> Result<Graph> {
        let position = |i: usize| keep.iter().position(|&k| k == i);
        let edges: Vec<(usize, usize)> = self
            .edges
            .iter()
            .filter_map(|&(a, b)| Some((position(a)?, position(b)?)))
            .collect();
        Graph::new(keep.len(), &edges)
    }

    fn bfs_depths(&self, source: usize) -> Vec<Option<usize>> {
        let mut depth = vec![None; self.n];
        depth[source] = Some(0);
        let mut queue = VecDeque::from([source]);
        while let Some(i) = queue.pop_front() {
            let next = depth[i].map(|d| d + 1);
            for &j in &self.neighbors[i] {
                if depth[j].is_none() {
                    depth[j] = next;
                    queue.push_back(j);
                }
            }
        }
        depth
    }

    fn component_count(&self) -> usize {
        let mut label = vec![false; self.n];
        let mut count = 0;
        for start in 0..self.n {
            if label[start] {
                continue;
            }
            count += 1;
            for (i, d) in self.bfs_depths(start).into_iter().enumerate() {
                if d.is_some() {
                    label[i] = true;
                }
            }
        }
        count
    }

    pub fn diameter(&self) -> usize {
        (0..self.n)
            .map(|s| self.bfs_depths(s).into_iter().flatten().max().unwrap_or(0))
            .max()
            .unwrap_or(0)
    }
}

pub fn build_graph(n: usize, edge_list: &[(usize, usize)]) -> Result<Graph> {
    Graph::new(n, edge_list)
}

/// Doubly stochastic weight matrix `A = [a_ij]` aligned with a [`Graph`].
///
/// Stored row-wise as `(column, weight)` pairs, diagonal first; every
/// non-listed entry is zero.
#[derive(Debug, Clone, PartialEq)]
pub struct MixingMatrix {
    n: usize,
    rows: Vec<Vec<(usize, f64)>>,
}

impl MixingMatrix {
    /// Metropolis–Hastings rule: `a_ij = 1/(1 + max(d_i, d_j))` on edges,
    /// diagonal takes the remainder.
    pub fn metropolis(graph: &Graph) -> Self {
        let n = graph.n();
        let rows = (0..n)
            .map(|i| {
                let off: Vec<(usize, f64)> = graph
                    .neighbors(i)
                    .iter()
                    .map(|&j| (j, 1.0 / (1.0 + graph.degree(i).max(graph.degree(j)) as f64)))
                    .collect();
                let diag = 1.0 - off.iter().map(|&(_, w)| w).sum::<f64>();
                std::iter::once((i, diag)).chain(off).collect()
            })
            .collect();
        MixingMatrix { n, rows }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn row(&self, i: usize) -> &[(usize, f64)] {
        &self.rows[i]
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.rows[i]
            .iter()
            .find(|&&(c, _)| c == j)
            .map(|&(_, w)| w)
            .unwrap_or(0.0)
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut dense = vec![vec![0.0; self.n]; self.n];
        for (i, row) in self.rows.iter().enumerate() {
            for &(j, w) in row {
                dense[i][j] = w;
            }
        }
        dense
    }

    /// `(max_i |row_sum_i - 1|, max_j |col_sum_j - 1|)`.
    pub fn stochasticity_error(&self) -> (f64, f64) {
        let mut col = vec![0.0; self.n];
        let mut row_err: f64 = 0.0;
        for row in &self.rows {
            let mut s = 0.0;
            for &(j, w) in row {
                s += w;
                col[j] += w;
            }
            row_err = row_err.max((s - 1.0).abs());
        }
        let col_err = col.iter().fold(0.0f64, |acc, c| acc.max((c - 1.0).abs()));
        (row_err, col_err)
    }

    pub fn mix_scalars(&self, values: &[f64]) -> Vec<f64> {
        self.rows
            .iter()
            .map(|row| row.iter().map(|&(j, w)| w * values[j]).sum())
            .collect()
    }

    /// Mixes a row-major `n × dim` buffer into `out`.
    pub fn mix_flat(&self, values: &[f64], dim: usize, out: &mut [f64]) {
        debug_assert_eq!(values.len(), self.n * dim);
        debug_assert_eq!(out.len(), self.n * dim);
        for (i, row) in self.rows.iter().enumerate() {
            let dst = &mut out[i * dim..(i + 1) * dim];
            dst.fill(0.0);
            for &(j, w) in row {
                let src = &values[j * dim..(j + 1) * dim];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += w * s;
                }
            }
        }
    }

    pub fn mix(&self, values: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        mix(self, values)
    }
}

pub fn metropolis_weights(graph: &Graph) -> MixingMatrix {
    MixingMatrix::metropolis(graph)
}

/// `out_i = Σ_j a_ij · values_j` for a family of equal-length vectors.
pub fn mix(matrix: &MixingMatrix, values: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    if values.len() != matrix.n {
        return Err(Error::DimensionMismatch {
            expected: matrix.n,
            found: values.len(),
        });
    }
    let dim = values.first().map_or(0, Vec::len);
    if let Some(bad) = values.iter().find(|v| v.len() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            found: bad.len(),
        });
    }
    if dim == 0 {
        return Ok(vec![Vec::new(); matrix.n]);
    }
    let flat: Vec<f64> = values.iter().flatten().copied().collect();
    let mut out = vec![0.0; flat.len()];
    matrix.mix_flat(&flat, dim, &mut out);
    Ok(out.chunks(dim).map(<[f64]>::to_vec).collect())
}
