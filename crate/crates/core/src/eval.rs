//! Hold-out splitting, Recall@N / NDCG@N, storage accounting and the planted
//! block graph used for small-scale checks.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::BipartiteGraph;
use crate::index::{HammingIndex, QueryCodes};
use crate::table::{HashTable, HEADER_BYTES};

/// Per-V1-node hold-out: `max(1, floor(ratio * deg))` edges go to the test
/// set, capped so at least one edge stays in train. Degree-1 nodes keep theirs.
pub fn split(graph: &BipartiteGraph, ratio: f64, seed: u64) -> Result<(BipartiteGraph, Vec<(usize, usize)>)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::InvalidArgument(format!("split ratio must lie in (0, 1), got {ratio}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::with_capacity(graph.num_edges());
    let mut test = Vec::new();
    for u in 0..graph.n1() {
        let mut items: Vec<usize> = graph.items_of(u).collect();
        let deg = items.len();
        let k = if deg < 2 {
            0
        } else {
            ((ratio * deg as f64).floor() as usize).clamp(1, deg - 1)
        };
        items.shuffle(&mut rng);
        for (i, &v) in items.iter().enumerate() {
            if i < k {
                test.push((u, v));
            } else {
                train.push((u, v));
            }
        }
    }
    test.sort_unstable();
    let train = BipartiteGraph::from_edges(graph.n1(), graph.n2(), train)?;
    Ok((train, test))
}

/// Ground-truth V2 ids per V1 node.
pub fn truth_lists(n1: usize, edges: &[(usize, usize)]) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new(); n1];
    for &(u, v) in edges {
        if u < n1 {
            out[u].push(v);
        }
    }
    for t in &mut out {
        t.sort_unstable();
        t.dedup();
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StorageReport {
    /// Serialized bits excluding the fixed header.
    pub code_bits: u64,
    /// Float32 storage of the same per-layer embeddings.
    pub float32_bits: u64,
    pub ratio: f64,
    pub header_bits: u64,
}

impl StorageReport {
    pub fn of(table: &HashTable) -> Self {
        let code_bits = 8 * (table.serialized_len() - HEADER_BYTES) as u64;
        let float32_bits = 32 * (table.nodes() * table.dim() * table.segments()) as u64;
        Self {
            code_bits,
            float32_bits,
            ratio: float32_bits as f64 / code_bits as f64,
            header_bits: 8 * HEADER_BYTES as u64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub recall_at: BTreeMap<usize, f64>,
    pub ndcg_at: BTreeMap<usize, f64>,
    /// Queries with non-empty ground truth.
    pub queries: usize,
    /// Queries skipped for empty ground truth.
    pub skipped: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub storage: Option<StorageReport>,
}

impl EvalReport {
    pub fn recall(&self, n: usize) -> f64 {
        self.recall_at.get(&n).copied().unwrap_or(f64::NAN)
    }

    pub fn ndcg(&self, n: usize) -> f64 {
        self.ndcg_at.get(&n).copied().unwrap_or(f64::NAN)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from("metric\tn\tvalue\n");
        for (n, v) in &self.recall_at {
            let _ = writeln!(s, "recall\t{n}\t{v:.6}");
        }
        for (n, v) in &self.ndcg_at {
            let _ = writeln!(s, "ndcg\t{n}\t{v:.6}");
        }
        let _ = writeln!(s, "queries\t-\t{}", self.queries);
        if let Some(st) = &self.storage {
            let _ = writeln!(s, "code_bits\t-\t{}", st.code_bits);
            let _ = writeln!(s, "float32_bits\t-\t{}", st.float32_bits);
            let _ = writeln!(s, "ratio\t-\t{:.4}", st.ratio);
        }
        s
    }
}

/// Macro-averaged Recall@N and binary-relevance NDCG@N. `rankings[q]` is the
/// ranked id list for query `q`, `truth[q]` its held-out ids.
pub fn recall_ndcg(rankings: &[Vec<usize>], truth: &[Vec<usize>], ns: &[usize]) -> Result<EvalReport> {
    if rankings.len() != truth.len() {
        return Err(Error::Shape(format!(
            "{} rankings for {} truth lists",
            rankings.len(),
            truth.len()
        )));
    }
    if ns.is_empty() || ns.contains(&0) {
        return Err(Error::InvalidArgument("cutoffs must be a non-empty list of positive integers".into()));
    }
    let mut recall: BTreeMap<usize, f64> = ns.iter().map(|&n| (n, 0.0)).collect();
    let mut ndcg = recall.clone();
    let mut queries = 0;
    let mut skipped = 0;
    for (ranked, t) in rankings.iter().zip(truth) {
        if t.is_empty() {
            skipped += 1;
            continue;
        }
        queries += 1;
        let hit: Vec<bool> = ranked.iter().map(|y| t.binary_search(y).is_ok()).collect();
        for &n in ns {
            let top = &hit[..n.min(hit.len())];
            let hits = top.iter().filter(|&&h| h).count();
            *recall.get_mut(&n).unwrap() += hits as f64 / t.len() as f64;
            let dcg: f64 = top
                .iter()
                .enumerate()
                .filter(|(_, &h)| h)
                .map(|(i, _)| 1.0 / ((i + 2) as f64).log2())
                .sum();
            let idcg: f64 = (0..n.min(t.len())).map(|i| 1.0 / ((i + 2) as f64).log2()).sum();
            *ndcg.get_mut(&n).unwrap() += dcg / idcg;
        }
    }
    if queries == 0 {
        return Err(Error::Degenerate("every query has empty ground truth".into()));
    }
    for v in recall.values_mut().chain(ndcg.values_mut()) {
        *v /= queries as f64;
    }
    Ok(EvalReport {
        recall_at: recall,
        ndcg_at: ndcg,
        queries,
        skipped,
        storage: None,
    })
}

/// Ranks V2 for every V1 node with held-out edges, excluding its `exclude`
/// neighbors, and scores the rankings against `test`.
pub fn evaluate(
    table: &HashTable,
    exclude: Option<&BipartiteGraph>,
    test: &[(usize, usize)],
    ns: &[usize],
) -> Result<EvalReport> {
    let index = HammingIndex::build(table);
    let truth = truth_lists(table.n1(), test);
    let depth = ns.iter().copied().max().unwrap_or(0);
    let mut mask = vec![false; table.n2()];
    let mut rankings = Vec::new();
    let mut truths = Vec::new();
    let mut scores = Vec::new();
    for (u, t) in truth.into_iter().enumerate() {
        if t.is_empty() {
            continue;
        }
        if let Some(g) = exclude {
            g.items_of(u).for_each(|v| mask[v] = true);
        }
        let q = QueryCodes::from_table(table, u)?;
        index.scores_into(&q, &mut scores)?;
        let top = crate::index::select_top(&scores, depth.max(1), exclude.map(|_| mask.as_slice()))?;
        rankings.push(top.ids());
        truths.push(t);
        if let Some(g) = exclude {
            g.items_of(u).for_each(|v| mask[v] = false);
        }
    }
    let mut report = recall_ndcg(&rankings, &truths, ns)?;
    report.storage = Some(StorageReport::of(table));
    Ok(report)
}

/// Expected Recall@N of a uniformly random ranking: for each query with
/// non-empty truth, `min(N, C) / C` where `C` is its candidate count.
pub fn random_recall(candidates: &[usize], n: usize) -> f64 {
    let valid: Vec<usize> = candidates.iter().copied().filter(|&c| c > 0).collect();
    if valid.is_empty() {
        return 0.0;
    }
    valid.iter().map(|&c| n.min(c) as f64 / c as f64).sum::<f64>() / valid.len() as f64
}

/// Candidate counts per evaluated query (V2 size minus excluded neighbors)
/// for [`random_recall`].
pub fn candidate_counts(n2: usize, exclude: Option<&BipartiteGraph>, test: &[(usize, usize)], n1: usize) -> Vec<usize> {
    truth_lists(n1, test)
        .iter()
        .enumerate()
        .filter(|(_, t)| !t.is_empty())
        .map(|(u, _)| n2 - exclude.map_or(0, |g| g.degree(u)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompressionRatios {
    /// `32 d / (d + 32 (L + 1))`: one d-bit code and `L + 1` factors per node.
    pub single_code: f64,
    /// `32 d (L + 1) / (d (L + 1) + 32 (L + 1))`: one code per layer.
    pub per_layer: f64,
}

pub fn compression_report(d: usize, layers: usize) -> Result<CompressionRatios> {
    if d == 0 {
        return Err(Error::InvalidArgument("d must be positive".into()));
    }
    let (d, s) = (d as f64, (layers + 1) as f64);
    Ok(CompressionRatios {
        single_code: 32.0 * d / (d + 32.0 * s),
        per_layer: 32.0 * d * s / (d * s + 32.0 * s),
    })
}

/// Block graph: V1 block `i` links to V2 block `i` with probability `p_in`
/// and to other blocks with `p_out`. Both sides hold `blocks * per_block` nodes.
pub fn planted_graph(blocks: usize, per_block: usize, p_in: f64, p_out: f64, seed: u64) -> Result<BipartiteGraph> {
    if blocks == 0 || per_block == 0 {
        return Err(Error::InvalidArgument("blocks and nodes per block must be positive".into()));
    }
    if !(0.0..=1.0).contains(&p_in) || !(0.0..=1.0).contains(&p_out) {
        return Err(Error::InvalidArgument(format!(
            "probabilities must lie in [0, 1], got {p_in} and {p_out}"
        )));
    }
    if p_in <= p_out {
        return Err(Error::InvalidArgument(format!("p_in={p_in} must exceed p_out={p_out}")));
    }
    let n = blocks * per_block;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut edges = Vec::new();
    for u in 0..n {
        for v in 0..n {
            let p = if u / per_block == v / per_block { p_in } else { p_out };
            if rng.random::<f64>() < p {
                edges.push((u, v));
            }
        }
    }
    BipartiteGraph::from_edges(n, n, edges)
}

/// Parses `planted:BLOCKS:PER_BLOCK:P_IN:P_OUT[:SEED]`.
pub fn parse_planted(desc: &str, default_seed: u64) -> Result<BipartiteGraph> {
    let bad = |msg: String| Error::Config {
        key: "data.synthetic".into(),
        msg,
    };
    let parts: Vec<&str> = desc.split(':').collect();
    if parts.first() != Some(&"planted") || !(5..=6).contains(&parts.len()) {
        return Err(bad(format!("expected planted:B:N:P_IN:P_OUT[:SEED], got {desc:?}")));
    }
    let int = |s: &str| s.parse::<usize>().map_err(|e| bad(format!("{s:?}: {e}")));
    let real = |s: &str| s.parse::<f64>().map_err(|e| bad(format!("{s:?}: {e}")));
    let seed = match parts.get(5) {
        Some(s) => s.parse::<u64>().map_err(|e| bad(format!("{s:?}: {e}")))?,
        None => default_seed,
    };
    planted_graph(int(parts[1])?, int(parts[2])?, real(parts[3])?, real(parts[4])?, seed)
}
