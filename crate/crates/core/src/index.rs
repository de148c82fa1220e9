//! Exact Top-N retrieval over V2 codes with popcount Hamming scoring, and a
//! dense float32 baseline for timing comparisons.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::table::{tail_mask, HashTable};

/// Differing positions among the first `dim` bits.
pub fn hamming_distance(a: &[u64], b: &[u64], dim: usize) -> Result<u32> {
    let words = dim.div_ceil(64);
    if a.len() != words || b.len() != words {
        return Err(Error::Shape(format!(
            "codes of {} and {} words for d={dim} ({words} words)",
            a.len(),
            b.len()
        )));
    }
    if words == 0 {
        return Ok(0);
    }
    let mut d = 0;
    for (x, y) in a[..words - 1].iter().zip(&b[..words - 1]) {
        d += (x ^ y).count_ones();
    }
    d += ((a[words - 1] ^ b[words - 1]) & tail_mask(dim)).count_ones();
    Ok(d)
}

/// Codes and factors of one query node, segment by segment.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryCodes {
    pub alphas: Vec<f32>,
    /// `[segment][word]`.
    pub codes: Vec<u64>,
}

impl QueryCodes {
    /// The codes of V1 node `x`.
    pub fn from_table(table: &HashTable, x: usize) -> Result<Self> {
        if x >= table.n1() {
            return Err(Error::NodeOutOfRange {
                node: x,
                limit: table.n1(),
            });
        }
        Ok(Self {
            alphas: table.alphas_of(x).to_vec(),
            codes: table.codes_of(x).to_vec(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub node: usize,
    pub score: f64,
}

/// Ranked hits, best first; ties by ascending id.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TopNResult {
    pub hits: Vec<Hit>,
}

impl TopNResult {
    pub fn ids(&self) -> Vec<usize> {
        self.hits.iter().map(|h| h.node).collect()
    }

    pub fn len(&self) -> usize {
        self.hits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hits.is_empty()
    }
}

/// Heap entry ordered so that `Greater` means ranked ahead.
#[derive(Debug, Clone, Copy)]
struct Ranked(Hit);

impl PartialEq for Ranked {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Ranked {}

impl PartialOrd for Ranked {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Ranked {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0
            .score
            .total_cmp(&other.0.score)
            .then_with(|| other.0.node.cmp(&self.0.node))
    }
}

/// Exact Top-`n` of `scores` with a bounded heap, skipping `exclude[y] == true`.
pub fn select_top(scores: &[f64], n: usize, exclude: Option<&[bool]>) -> Result<TopNResult> {
    if n == 0 {
        return Err(Error::InvalidArgument("N must be at least 1".into()));
    }
    if let Some(mask) = exclude {
        if mask.len() != scores.len() {
            return Err(Error::Shape(format!(
                "exclusion mask covers {} of {} candidates",
                mask.len(),
                scores.len()
            )));
        }
    }
    let mut heap: BinaryHeap<Reverse<Ranked>> = BinaryHeap::with_capacity(n + 1);
    for (node, &score) in scores.iter().enumerate() {
        if exclude.is_some_and(|m| m[node]) {
            continue;
        }
        let entry = Ranked(Hit { node, score });
        if heap.len() < n {
            heap.push(Reverse(entry));
        } else if let Some(worst) = heap.peek() {
            if entry > worst.0 {
                heap.pop();
                heap.push(Reverse(entry));
            }
        }
    }
    let mut hits: Vec<Ranked> = heap.into_iter().map(|r| r.0).collect();
    hits.sort_by(|a, b| b.cmp(a));
    Ok(TopNResult {
        hits: hits.into_iter().map(|r| r.0).collect(),
    })
}

/// V2 codes laid out segment-major: all nodes' layer-0 words, then layer 1, ...
#[derive(Debug, Clone, PartialEq)]
pub struct HammingIndex {
    n1: usize,
    n2: usize,
    dim: usize,
    segments: usize,
    words: usize,
    /// `[segment][node][word]`.
    codes: Vec<u64>,
    /// `[segment][node]`.
    alphas: Vec<f32>,
}

impl HammingIndex {
    pub fn build(table: &HashTable) -> Self {
        let (n1, n2, segments, words) = (table.n1(), table.n2(), table.segments(), table.words_per_code());
        let mut codes = Vec::with_capacity(segments * n2 * words);
        let mut alphas = Vec::with_capacity(segments * n2);
        for l in 0..segments {
            for y in 0..n2 {
                codes.extend_from_slice(table.code(n1 + y, l));
                alphas.push(table.alpha(n1 + y, l));
            }
        }
        Self {
            n1,
            n2,
            dim: table.dim(),
            segments,
            words,
            codes,
            alphas,
        }
    }

    pub fn n1(&self) -> usize {
        self.n1
    }

    pub fn n2(&self) -> usize {
        self.n2
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn segments(&self) -> usize {
        self.segments
    }

    /// Offset of segment `l` in the code array.
    pub fn segment_offset(&self, l: usize) -> usize {
        l * self.n2 * self.words
    }

    pub fn candidate_code(&self, y: usize, l: usize) -> &[u64] {
        let off = self.segment_offset(l) + y * self.words;
        &self.codes[off..off + self.words]
    }

    pub fn candidate_alpha(&self, y: usize, l: usize) -> f32 {
        self.alphas[l * self.n2 + y]
    }

    fn check_query(&self, q: &QueryCodes) -> Result<()> {
        if q.alphas.len() != self.segments || q.codes.len() != self.segments * self.words {
            return Err(Error::Shape(format!(
                "query has {} factors and {} words, index expects {} and {}",
                q.alphas.len(),
                q.codes.len(),
                self.segments,
                self.segments * self.words
            )));
        }
        Ok(())
    }

    /// Score of every candidate, accumulated segment by segment in `f64`.
    pub fn scores_into(&self, q: &QueryCodes, out: &mut Vec<f64>) -> Result<()> {
        self.check_query(q)?;
        out.clear();
        out.resize(self.n2, 0.0);
        let mask = tail_mask(self.dim);
        for l in 0..self.segments {
            let qc = &q.codes[l * self.words..(l + 1) * self.words];
            let qa = f64::from(q.alphas[l]);
            let seg = &self.codes[self.segment_offset(l)..self.segment_offset(l + 1)];
            let alphas = &self.alphas[l * self.n2..(l + 1) * self.n2];
            scan_segment(qc, qa, seg, alphas, self.dim, mask, out);
        }
        Ok(())
    }

    pub fn scores(&self, q: &QueryCodes) -> Result<Vec<f64>> {
        let mut out = Vec::new();
        self.scores_into(q, &mut out)?;
        Ok(out)
    }

    /// Exact Top-N; returns every remaining candidate when `n` exceeds them.
    pub fn topn(&self, q: &QueryCodes, n: usize, exclude: Option<&[bool]>) -> Result<TopNResult> {
        let scores = self.scores(q)?;
        select_top(&scores, n, exclude)
    }

    /// Dense `alpha`-scaled +-1 vectors of all candidates, for the float baseline.
    pub fn dense_candidates(&self) -> DenseIndex {
        let width = self.segments * self.dim;
        let mut data = vec![0.0f32; self.n2 * width];
        for y in 0..self.n2 {
            let row = &mut data[y * width..(y + 1) * width];
            for l in 0..self.segments {
                fill_dense(
                    self.candidate_code(y, l),
                    self.candidate_alpha(y, l),
                    &mut row[l * self.dim..(l + 1) * self.dim],
                );
            }
        }
        DenseIndex { width, rows: self.n2, data }
    }

    pub fn dense_query(&self, q: &QueryCodes) -> Result<Vec<f32>> {
        self.check_query(q)?;
        let mut v = vec![0.0f32; self.segments * self.dim];
        for l in 0..self.segments {
            fill_dense(
                &q.codes[l * self.words..(l + 1) * self.words],
                q.alphas[l],
                &mut v[l * self.dim..(l + 1) * self.dim],
            );
        }
        Ok(v)
    }
}

fn fill_dense(words: &[u64], alpha: f32, out: &mut [f32]) {
    for (i, o) in out.iter_mut().enumerate() {
        *o = if words[i / 64] >> (i % 64) & 1 == 1 { alpha } else { -alpha };
    }
}

fn scan_segment(q: &[u64], qa: f64, seg: &[u64], alphas: &[f32], dim: usize, mask: u64, out: &mut [f64]) {
    #[cfg(target_arch = "x86_64")]
    {
        if std::is_x86_feature_detected!("popcnt") {
            // SAFETY: the CPU supports popcnt, checked just above.
            unsafe { scan_segment_popcnt(q, qa, seg, alphas, dim, mask, out) };
            return;
        }
    }
    scan_segment_portable(q, qa, seg, alphas, dim, mask, out);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "popcnt")]
unsafe fn scan_segment_popcnt(q: &[u64], qa: f64, seg: &[u64], alphas: &[f32], dim: usize, mask: u64, out: &mut [f64]) {
    scan_segment_portable(q, qa, seg, alphas, dim, mask, out)
}

#[inline(always)]
fn scan_segment_portable(q: &[u64], qa: f64, seg: &[u64], alphas: &[f32], dim: usize, mask: u64, out: &mut [f64]) {
    let words = q.len();
    let d = dim as f64;
    let last = words - 1;
    for ((code, &a), o) in seg.chunks_exact(words).zip(alphas).zip(out.iter_mut()) {
        let mut dist = 0u32;
        for w in 0..last {
            dist += (q[w] ^ code[w]).count_ones();
        }
        dist += ((q[last] ^ code[last]) & mask).count_ones();
        *o += qa * f64::from(a) * (d - 2.0 * f64::from(dist));
    }
}

/// Row-major dense float32 candidate matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseIndex {
    pub width: usize,
    pub rows: usize,
    pub data: Vec<f32>,
}

impl DenseIndex {
    pub fn scores_into(&self, q: &[f32], out: &mut Vec<f64>) {
        out.clear();
        out.extend(self.data.chunks_exact(self.width).map(|row| f64::from(dot_f32(q, row))));
    }

    pub fn topn(&self, q: &[f32], n: usize, exclude: Option<&[bool]>) -> Result<TopNResult> {
        let mut scores = Vec::with_capacity(self.rows);
        self.scores_into(q, &mut scores);
        select_top(&scores, n, exclude)
    }
}

/// Dot product with eight independent accumulators.
#[inline]
pub fn dot_f32(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0.0f32; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    let mut s: f32 = acc.iter().sum();
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub queries: usize,
    pub candidates: usize,
    pub dim: usize,
    pub segments: usize,
    pub topn: usize,
    pub mean_us_hamming: f64,
    pub mean_us_float: f64,
    pub speedup: f64,
    /// `n2 d (L+1)` binary operations.
    pub bops_per_query: u64,
    /// `4 n2` scalar floating-point operations.
    pub flops_per_query: u64,
    /// `2 n2 d (L+1)` for the dense baseline.
    pub baseline_flops_per_query: u64,
    /// Whether both paths returned identical rankings on every query.
    pub rankings_agree: bool,
}

/// Times Top-`n` for `queries` V1 nodes (cycling through V1) on both paths,
/// single-threaded. Ranking agreement is checked outside the timed region.
pub fn bench(table: &HashTable, index: &HammingIndex, queries: usize, n: usize) -> Result<BenchReport> {
    if table.n1() == 0 || index.n2() == 0 {
        return Err(Error::InvalidArgument("bench needs at least one query and one candidate".into()));
    }
    let dense = index.dense_candidates();
    let qs: Vec<QueryCodes> = (0..queries)
        .map(|k| QueryCodes::from_table(table, k % table.n1()))
        .collect::<Result<_>>()?;
    let dq: Vec<Vec<f32>> = qs.iter().map(|q| index.dense_query(q)).collect::<Result<_>>()?;

    let mut scores = Vec::with_capacity(index.n2());
    let mut hamming = Vec::with_capacity(queries);
    let start = Instant::now();
    for q in &qs {
        index.scores_into(q, &mut scores)?;
        hamming.push(select_top(&scores, n, None)?);
    }
    let t_hamming = start.elapsed().as_secs_f64();

    let mut float = Vec::with_capacity(queries);
    let start = Instant::now();
    for q in &dq {
        dense.scores_into(q, &mut scores);
        float.push(select_top(&scores, n, None)?);
    }
    let t_float = start.elapsed().as_secs_f64();

    let rankings_agree = hamming.iter().zip(&float).all(|(a, b)| a.ids() == b.ids());
    let per = |t: f64| t * 1e6 / queries.max(1) as f64;
    let (n2, width) = (index.n2() as u64, (index.dim() * index.segments()) as u64);
    Ok(BenchReport {
        queries,
        candidates: index.n2(),
        dim: index.dim(),
        segments: index.segments(),
        topn: n,
        mean_us_hamming: per(t_hamming),
        mean_us_float: per(t_float),
        speedup: if t_hamming > 0.0 { t_float / t_hamming } else { f64::INFINITY },
        bops_per_query: n2 * width,
        flops_per_query: 4 * n2,
        baseline_flops_per_query: 2 * n2 * width,
        rankings_agree,
    })
}
