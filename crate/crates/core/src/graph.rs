//! Bipartite graph storage, edge-list parsing and the symmetric normalized
//! adjacency operator `D^{-1/2} A D^{-1/2}`.
//!
//! Both node sets share one index space: V1 node `u` is row `u`, V2 node `v`
//! is row `n1 + v`.

use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use log::warn;

use crate::error::{Error, Result};
use crate::linalg::{Matrix, Real};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BipartiteGraph {
    n1: usize,
    n2: usize,
    /// Sorted, deduplicated `(u, v)` pairs with `u < n1`, `v < n2`.
    edges: Vec<(usize, usize)>,
    offsets: Vec<usize>,
    targets: Vec<usize>,
}

impl BipartiteGraph {
    /// Builds the graph, silently dropping duplicate edges.
    pub fn from_edges(n1: usize, n2: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        Ok(Self::from_edges_counted(n1, n2, edges)?.0)
    }

    /// Like [`BipartiteGraph::from_edges`] but also returns how many duplicates were dropped.
    pub fn from_edges_counted(
        n1: usize,
        n2: usize,
        edges: impl IntoIterator<Item = (usize, usize)>,
    ) -> Result<(Self, usize)> {
        let mut edges: Vec<(usize, usize)> = edges.into_iter().collect();
        for &(u, v) in &edges {
            if u >= n1 || v >= n2 {
                return Err(Error::InvalidGraph(format!(
                    "edge ({u}, {v}) outside bounds n1={n1}, n2={n2}"
                )));
            }
        }
        if edges.is_empty() {
            return Err(Error::EmptyGraph);
        }
        let before = edges.len();
        edges.sort_unstable();
        edges.dedup();
        let duplicates = before - edges.len();

        let n = n1 + n2;
        let mut degree = vec![0usize; n];
        for &(u, v) in &edges {
            degree[u] += 1;
            degree[n1 + v] += 1;
        }
        let mut offsets = Vec::with_capacity(n + 1);
        offsets.push(0);
        for d in &degree {
            offsets.push(offsets.last().unwrap() + d);
        }
        let mut fill = offsets[..n].to_vec();
        let mut targets = vec![0usize; offsets[n]];
        for &(u, v) in &edges {
            targets[fill[u]] = n1 + v;
            fill[u] += 1;
            targets[fill[n1 + v]] = u;
            fill[n1 + v] += 1;
        }
        for i in 0..n {
            targets[offsets[i]..offsets[i + 1]].sort_unstable();
        }
        Ok((
            Self {
                n1,
                n2,
                edges,
                offsets,
                targets,
            },
            duplicates,
        ))
    }

    #[inline]
    pub fn n1(&self) -> usize {
        self.n1
    }

    #[inline]
    pub fn n2(&self) -> usize {
        self.n2
    }

    #[inline]
    pub fn num_nodes(&self) -> usize {
        self.n1 + self.n2
    }

    #[inline]
    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    /// Neighbors of a node in unified indexing.
    #[inline]
    pub fn neighbors(&self, node: usize) -> &[usize] {
        &self.targets[self.offsets[node]..self.offsets[node + 1]]
    }

    #[inline]
    pub fn degree(&self, node: usize) -> usize {
        self.offsets[node + 1] - self.offsets[node]
    }

    /// V2-local ids adjacent to V1 node `u`.
    pub fn items_of(&self, u: usize) -> impl Iterator<Item = usize> + '_ {
        let n1 = self.n1;
        self.neighbors(u).iter().map(move |&t| t - n1)
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        u < self.n1 && v < self.n2 && self.neighbors(u).binary_search(&(self.n1 + v)).is_ok()
    }
}

/// A parsed edge-list file.
#[derive(Debug, Clone)]
pub struct LoadedGraph {
    pub graph: BipartiteGraph,
    pub duplicates: usize,
    /// Whether the `#n1 N n2 M` header was present.
    pub declared: bool,
}

pub fn load_edge_list(path: impl AsRef<Path>) -> Result<LoadedGraph> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_edge_list(BufReader::new(file))
}

/// Parses `<u> <v>` lines with an optional `#n1 N n2 M` header; other
/// `#`-prefixed lines are comments.
pub fn parse_edge_list(reader: impl BufRead) -> Result<LoadedGraph> {
    let mut header: Option<(usize, usize)> = None;
    let mut edges = Vec::new();
    let (mut max_u, mut max_v) = (0usize, 0usize);

    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::Parse {
            line: lineno,
            msg: e.to_string(),
        })?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            let toks: Vec<&str> = rest.split_whitespace().collect();
            if toks.first() == Some(&"n1") {
                if !edges.is_empty() || header.is_some() {
                    return Err(Error::Parse {
                        line: lineno,
                        msg: "header must appear once, before any edge".into(),
                    });
                }
                header = Some(parse_header(&toks, lineno)?);
            }
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.len() {
            2 => {}
            3 => {
                return Err(Error::Parse {
                    line: lineno,
                    msg: "weighted edges are not supported".into(),
                })
            }
            _ => {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!("expected two node ids, got {line:?}"),
                })
            }
        }
        let u = parse_id(toks[0], lineno)?;
        let v = parse_id(toks[1], lineno)?;
        if let Some((n1, n2)) = header {
            if u >= n1 || v >= n2 {
                return Err(Error::OutOfBounds {
                    line: lineno,
                    msg: format!("edge ({u}, {v}) exceeds declared n1={n1}, n2={n2}"),
                });
            }
        }
        max_u = max_u.max(u);
        max_v = max_v.max(v);
        edges.push((u, v));
    }

    if edges.is_empty() {
        return Err(Error::EmptyGraph);
    }
    let (n1, n2) = header.unwrap_or((max_u + 1, max_v + 1));
    let (graph, duplicates) = BipartiteGraph::from_edges_counted(n1, n2, edges)?;
    if duplicates > 0 {
        warn!("dropped {duplicates} duplicate edge(s)");
    }
    Ok(LoadedGraph {
        graph,
        duplicates,
        declared: header.is_some(),
    })
}

fn parse_header(toks: &[&str], line: usize) -> Result<(usize, usize)> {
    if toks.len() != 4 || toks[0] != "n1" || toks[2] != "n2" {
        return Err(Error::Parse {
            line,
            msg: "header must read `#n1 <int> n2 <int>`".into(),
        });
    }
    Ok((parse_id(toks[1], line)?, parse_id(toks[3], line)?))
}

fn parse_id(tok: &str, line: usize) -> Result<usize> {
    tok.parse::<usize>().map_err(|_| Error::Parse {
        line,
        msg: format!("{tok:?} is not a non-negative integer"),
    })
}

/// Writes edges in the same text format `parse_edge_list` reads.
pub fn write_edge_list(
    path: impl AsRef<Path>,
    n1: usize,
    n2: usize,
    edges: &[(usize, usize)],
) -> Result<()> {
    use std::fmt::Write as _;
    let path = path.as_ref();
    let mut out = format!("#n1 {n1} n2 {n2}\n");
    for &(u, v) in edges {
        let _ = writeln!(out, "{u}\t{v}");
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Sparse symmetric operator holding `1/sqrt(deg(i) deg(j))` for every edge.
///
/// Immutable after construction. Isolated nodes have empty rows.
#[derive(Debug, Clone)]
pub struct NormalizedOperator {
    offsets: Vec<usize>,
    cols: Vec<usize>,
    values: Vec<f64>,
    degrees: Vec<u32>,
}

pub fn normalize(graph: &BipartiteGraph) -> NormalizedOperator {
    let n = graph.num_nodes();
    let degrees: Vec<u32> = (0..n).map(|i| graph.degree(i) as u32).collect();
    let inv_sqrt: Vec<f64> = degrees
        .iter()
        .map(|&d| if d == 0 { 0.0 } else { 1.0 / (d as f64).sqrt() })
        .collect();
    let mut offsets = Vec::with_capacity(n + 1);
    offsets.push(0);
    let mut cols = Vec::with_capacity(2 * graph.num_edges());
    let mut values = Vec::with_capacity(2 * graph.num_edges());
    for i in 0..n {
        for &j in graph.neighbors(i) {
            cols.push(j);
            values.push(inv_sqrt[i] * inv_sqrt[j]);
        }
        offsets.push(cols.len());
    }
    NormalizedOperator {
        offsets,
        cols,
        values,
        degrees,
    }
}

impl NormalizedOperator {
    #[inline]
    pub fn dim(&self) -> usize {
        self.degrees.len()
    }

    pub fn degrees(&self) -> &[u32] {
        &self.degrees
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Stored `(column, value)` pairs of row `i`.
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.offsets[i]..self.offsets[i + 1];
        self.cols[span.clone()]
            .iter()
            .copied()
            .zip(self.values[span].iter().copied())
    }

    /// Value at `(i, j)`, zero when no edge is stored.
    pub fn entry(&self, i: usize, j: usize) -> f64 {
        let span = self.offsets[i]..self.offsets[i + 1];
        match self.cols[span.clone()].binary_search(&j) {
            Ok(k) => self.values[span.start + k],
            Err(_) => 0.0,
        }
    }

    /// Sparse product `Â · V`.
    pub fn propagate<T: Real>(&self, v: &Matrix<T>) -> Result<Matrix<T>> {
        if v.rows() != self.dim() {
            return Err(Error::Shape(format!(
                "operator is {n}x{n} but embeddings have {} rows",
                v.rows(),
                n = self.dim()
            )));
        }
        let c = v.cols();
        let mut out = Matrix::zeros(v.rows(), c);
        for i in 0..self.dim() {
            let dst = out.row_mut(i);
            for (j, w) in self.row(i) {
                let w = T::of(w);
                for (d, &s) in dst.iter_mut().zip(v.row(j)) {
                    *d = *d + w * s;
                }
            }
        }
        Ok(out)
    }
}
