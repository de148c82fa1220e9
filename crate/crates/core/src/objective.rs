//! Loss terms and their analytic gradients.
//!
//! * BPR over `(x, y+, y-)` triples scored as `sum_l a_x a_y (Q_x . Q_y)`;
//! * InfoNCE over the continuous views (`cl1`);
//! * InfoNCE over the rescaled binary views (`cl2`), with code inner products
//!   evaluated segment by segment;
//! * squared L2 on the layer-0 rows a batch touches.
//!
//! All reductions are sums over the batch and are accumulated in `f64`.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::augment::AugmentedViews;
use crate::error::{Error, Result};
use crate::graph::BipartiteGraph;
use crate::linalg::{Matrix, Real};
use crate::model::EmbeddingState;
use crate::table::HashTable;

pub const LOGIT_CLAMP: f64 = 40.0;

/// Read access to per-segment factors and codes, indexed by unified node id.
///
/// [`HashTable`] answers code inner products with popcounts; [`DenseCodes`]
/// holds real-valued (possibly relaxed) codes for reference computations.
pub trait CodeSource {
    fn segments(&self) -> usize;
    fn dim(&self) -> usize;
    fn alpha(&self, node: usize, layer: usize) -> f64;
    /// `Q_a^(l) . Q_b^(l)`.
    fn code_dot(&self, a: usize, b: usize, layer: usize) -> f64;
    fn code_value(&self, node: usize, layer: usize, i: usize) -> f64;

    fn code_into(&self, node: usize, layer: usize, out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            *o = self.code_value(node, layer, i);
        }
    }

    fn score(&self, a: usize, b: usize) -> f64 {
        (0..self.segments())
            .map(|l| self.alpha(a, l) * self.alpha(b, l) * self.code_dot(a, b, l))
            .sum()
    }
}

impl CodeSource for HashTable {
    fn segments(&self) -> usize {
        HashTable::segments(self)
    }

    fn dim(&self) -> usize {
        HashTable::dim(self)
    }

    #[inline]
    fn alpha(&self, node: usize, layer: usize) -> f64 {
        HashTable::alpha(self, node, layer) as f64
    }

    #[inline]
    fn code_dot(&self, a: usize, b: usize, layer: usize) -> f64 {
        HashTable::dim(self) as f64 - 2.0 * self.segment_distance(a, b, layer) as f64
    }

    #[inline]
    fn code_value(&self, node: usize, layer: usize, i: usize) -> f64 {
        if self.bit(node, layer, i) {
            1.0
        } else {
            -1.0
        }
    }

    fn code_into(&self, node: usize, layer: usize, out: &mut [f64]) {
        let words = self.code(node, layer);
        for (i, o) in out.iter_mut().enumerate() {
            *o = if words[i / 64] >> (i % 64) & 1 == 1 { 1.0 } else { -1.0 };
        }
    }

    fn score(&self, a: usize, b: usize) -> f64 {
        self.score_unified(a, b)
    }
}

/// Dense real-valued codes and factors.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseCodes {
    nodes: usize,
    segments: usize,
    dim: usize,
    alpha: Vec<f64>,
    codes: Vec<f64>,
}

impl DenseCodes {
    /// Codes `code_fn(V)` elementwise; factors `|V|_1 / d` (or 1 without rescaling).
    pub fn from_states<T: Real>(states: &EmbeddingState<T>, code_fn: impl Fn(f64) -> f64, rescale: bool) -> Self {
        let nodes = states.nodes();
        let dim = states.dim();
        let segments = states.layers.len();
        let mut alpha = Vec::with_capacity(nodes * segments);
        let mut codes = Vec::with_capacity(nodes * segments * dim);
        for node in 0..nodes {
            for layer in &states.layers {
                let row = layer.row(node);
                let a = row.iter().map(|v| v.f64().abs()).sum::<f64>() / dim as f64;
                alpha.push(if rescale { a } else { 1.0 });
                codes.extend(row.iter().map(|v| code_fn(v.f64())));
            }
        }
        Self {
            nodes,
            segments,
            dim,
            alpha,
            codes,
        }
    }

    pub fn from_table(table: &HashTable) -> Self {
        let nodes = table.nodes();
        let segments = table.segments();
        let dim = table.dim();
        let mut alpha = Vec::with_capacity(nodes * segments);
        let mut codes = vec![0.0; nodes * segments * dim];
        for node in 0..nodes {
            for l in 0..segments {
                alpha.push(table.alpha(node, l) as f64);
                let off = (node * segments + l) * dim;
                CodeSource::code_into(table, node, l, &mut codes[off..off + dim]);
            }
        }
        Self {
            nodes,
            segments,
            dim,
            alpha,
            codes,
        }
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    pub fn alpha_mut(&mut self, node: usize, layer: usize) -> &mut f64 {
        &mut self.alpha[node * self.segments + layer]
    }

    pub fn code(&self, node: usize, layer: usize) -> &[f64] {
        let off = (node * self.segments + layer) * self.dim;
        &self.codes[off..off + self.dim]
    }

    pub fn code_mut(&mut self, node: usize, layer: usize) -> &mut [f64] {
        let off = (node * self.segments + layer) * self.dim;
        &mut self.codes[off..off + self.dim]
    }
}

impl CodeSource for DenseCodes {
    fn segments(&self) -> usize {
        self.segments
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn alpha(&self, node: usize, layer: usize) -> f64 {
        self.alpha[node * self.segments + layer]
    }

    fn code_dot(&self, a: usize, b: usize, layer: usize) -> f64 {
        self.code(a, layer)
            .iter()
            .zip(self.code(b, layer))
            .map(|(x, y)| x * y)
            .sum()
    }

    fn code_value(&self, node: usize, layer: usize, i: usize) -> f64 {
        self.code(node, layer)[i]
    }

    fn code_into(&self, node: usize, layer: usize, out: &mut [f64]) {
        out.copy_from_slice(self.code(node, layer));
    }
}

/// Sparse accumulator for `dL/d alpha` and `dL/dQ`, keyed by unified node id.
#[derive(Debug, Clone, PartialEq)]
pub struct CodeGrads {
    segments: usize,
    dim: usize,
    index: HashMap<usize, usize>,
    nodes: Vec<usize>,
    alpha: Vec<f64>,
    code: Vec<f64>,
}

impl CodeGrads {
    pub fn new(segments: usize, dim: usize) -> Self {
        Self {
            segments,
            dim,
            index: HashMap::new(),
            nodes: Vec::new(),
            alpha: Vec::new(),
            code: Vec::new(),
        }
    }

    fn slot(&mut self, node: usize) -> usize {
        if let Some(&k) = self.index.get(&node) {
            return k;
        }
        let k = self.nodes.len();
        self.index.insert(node, k);
        self.nodes.push(node);
        self.alpha.resize(self.alpha.len() + self.segments, 0.0);
        self.code.resize(self.code.len() + self.segments * self.dim, 0.0);
        k
    }

    pub fn add_alpha(&mut self, node: usize, layer: usize, g: f64) {
        let k = self.slot(node);
        self.alpha[k * self.segments + layer] += g;
    }

    pub fn code_mut(&mut self, node: usize, layer: usize) -> &mut [f64] {
        let k = self.slot(node);
        let off = (k * self.segments + layer) * self.dim;
        &mut self.code[off..off + self.dim]
    }

    /// Nodes in first-touch order.
    pub fn nodes(&self) -> &[usize] {
        &self.nodes
    }

    pub fn alpha(&self, node: usize, layer: usize) -> f64 {
        self.index
            .get(&node)
            .map_or(0.0, |&k| self.alpha[k * self.segments + layer])
    }

    pub fn code(&self, node: usize, layer: usize) -> Option<&[f64]> {
        self.index.get(&node).map(|&k| {
            let off = (k * self.segments + layer) * self.dim;
            &self.code[off..off + self.dim]
        })
    }

    /// `self += scale * other`, visiting `other` in its insertion order.
    pub fn merge_scaled(&mut self, other: &CodeGrads, scale: f64) {
        for (k, &node) in other.nodes.iter().enumerate() {
            for l in 0..self.segments {
                let a = other.alpha[k * self.segments + l];
                self.add_alpha(node, l, scale * a);
                let off = (k * self.segments + l) * self.dim;
                let src = &other.code[off..off + self.dim];
                for (d, s) in self.code_mut(node, l).iter_mut().zip(src) {
                    *d += scale * s;
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Triple {
    /// V1 id.
    pub user: usize,
    /// V2 id of an observed neighbor.
    pub pos: usize,
    /// V2 id of an unobserved node.
    pub neg: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainBatch {
    /// Offset that maps V2 ids into the unified index.
    pub n1: usize,
    pub triples: Vec<Triple>,
}

impl TrainBatch {
    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    pub fn validate(&self, graph: &BipartiteGraph) -> Result<()> {
        for t in &self.triples {
            if !graph.has_edge(t.user, t.pos) {
                return Err(Error::InvalidArgument(format!(
                    "({}, {}) is not an observed edge",
                    t.user, t.pos
                )));
            }
            if t.neg >= graph.n2() || graph.has_edge(t.user, t.neg) {
                return Err(Error::InvalidArgument(format!(
                    "({}, {}) is not a valid negative",
                    t.user, t.neg
                )));
            }
        }
        Ok(())
    }

    /// Distinct unified ids touched by the batch, in first-touch order.
    pub fn touched(&self) -> Vec<usize> {
        let mut seen = std::collections::HashSet::new();
        let mut out = Vec::new();
        for t in &self.triples {
            for node in [t.user, self.n1 + t.pos, self.n1 + t.neg] {
                if seen.insert(node) {
                    out.push(node);
                }
            }
        }
        out
    }

    /// Distinct V1 nodes and distinct positive V2 nodes (unified ids).
    pub fn contrast_groups(&self) -> [Vec<usize>; 2] {
        let mut seen = std::collections::HashSet::new();
        let (mut users, mut items) = (Vec::new(), Vec::new());
        for t in &self.triples {
            if seen.insert(t.user) {
                users.push(t.user);
            }
            if seen.insert(self.n1 + t.pos) {
                items.push(self.n1 + t.pos);
            }
        }
        [users, items]
    }
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `-ln sigmoid(z)`.
#[inline]
fn neg_log_sigmoid(z: f64) -> f64 {
    if z > 0.0 {
        (-z).exp().ln_1p()
    } else {
        -z + z.exp().ln_1p()
    }
}

#[derive(Debug, Clone)]
pub struct BprOutput {
    pub loss: f64,
    pub grads: CodeGrads,
}

/// `-sum ln sigmoid(Y_xy+ - Y_xy-)` with gradients w.r.t. every involved factor
/// and (relaxed) code entry.
pub fn bpr_loss(batch: &TrainBatch, codes: &dyn CodeSource) -> Result<BprOutput> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("BPR batch is empty".into()));
    }
    let segments = codes.segments();
    let dim = codes.dim();
    let mut grads = CodeGrads::new(segments, dim);
    let mut loss = 0.0;
    let (mut qx, mut qp, mut qn) = (vec![0.0; dim], vec![0.0; dim], vec![0.0; dim]);

    for t in &batch.triples {
        let (x, p, n) = (t.user, batch.n1 + t.pos, batch.n1 + t.neg);
        let delta = (codes.score(x, p) - codes.score(x, n)).clamp(-LOGIT_CLAMP, LOGIT_CLAMP);
        loss += neg_log_sigmoid(delta);
        let g = -sigmoid(-delta);

        for l in 0..segments {
            let (ax, ap, an) = (codes.alpha(x, l), codes.alpha(p, l), codes.alpha(n, l));
            let (dp, dn) = (codes.code_dot(x, p, l), codes.code_dot(x, n, l));
            grads.add_alpha(x, l, g * (ap * dp - an * dn));
            grads.add_alpha(p, l, g * ax * dp);
            grads.add_alpha(n, l, -g * ax * dn);

            codes.code_into(x, l, &mut qx);
            codes.code_into(p, l, &mut qp);
            codes.code_into(n, l, &mut qn);
            for ((gx, &vp), &vn) in grads.code_mut(x, l).iter_mut().zip(&qp).zip(&qn) {
                *gx += g * ax * (ap * vp - an * vn);
            }
            for (gp, &vx) in grads.code_mut(p, l).iter_mut().zip(&qx) {
                *gp += g * ax * ap * vx;
            }
            for (gn, &vx) in grads.code_mut(n, l).iter_mut().zip(&qx) {
                *gn -= g * ax * an * vx;
            }
        }
    }
    Ok(BprOutput { loss, grads })
}

/// Row-wise log-softmax pieces for a `b x b` logit matrix: returns the loss
/// `sum_x (lse_x - s_xx)` and overwrites `logits` with `p_xy - [x == y]`.
fn info_nce_in_place(logits: &mut [f64], b: usize) -> f64 {
    let mut loss = 0.0;
    for x in 0..b {
        let row = &mut logits[x * b..(x + 1) * b];
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|&s| (s - m).exp()).sum();
        let lse = m + sum.ln();
        loss += lse - row[x];
        for (y, s) in row.iter_mut().enumerate() {
            *s = (*s - lse).exp() - if y == x { 1.0 } else { 0.0 };
        }
    }
    loss
}

/// Dot product with four independent accumulators.
#[inline]
fn dot4(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    acc[0] + acc[1] + acc[2] + acc[3] + tail
}

/// `y += a x`.
#[inline]
fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (o, &v) in y.iter_mut().zip(x) {
        *o += a * v;
    }
}

#[derive(Debug, Clone)]
pub struct ContinuousClOutput {
    pub loss: f64,
    /// `dL/dV'` and `dL/dV''`, laid out like [`AugmentedViews::cont`].
    pub grad: [Vec<f64>; 2],
}

/// InfoNCE between the two continuous views; the positive pair sits in the
/// denominator as well.
pub fn cl_loss_continuous(views: &AugmentedViews, sigma: f64) -> Result<ContinuousClOutput> {
    check_sigma(sigma)?;
    let b = views.len();
    let w = views.width();
    let mut grad = [vec![0.0; b * w], vec![0.0; b * w]];
    if b < 2 {
        log::debug!("contrastive batch of {b} node(s); loss is zero");
        return Ok(ContinuousClOutput { loss: 0.0, grad });
    }
    let (v1, v2) = (&views.cont[0], &views.cont[1]);
    let mut logits = vec![0.0; b * b];
    for (x, vx) in v1.chunks_exact(w).enumerate() {
        for (y, vy) in v2.chunks_exact(w).enumerate() {
            logits[x * b + y] = dot4(vx, vy) / sigma;
        }
    }
    let loss = info_nce_in_place(&mut logits, b);
    let [g1, g2] = &mut grad;
    for (x, gx) in g1.chunks_exact_mut(w).enumerate() {
        for (y, vy) in v2.chunks_exact(w).enumerate() {
            axpy(logits[x * b + y] / sigma, vy, gx);
        }
    }
    for (y, gy) in g2.chunks_exact_mut(w).enumerate() {
        for (x, vx) in v1.chunks_exact(w).enumerate() {
            axpy(logits[x * b + y] / sigma, vx, gy);
        }
    }
    Ok(ContinuousClOutput { loss, grad })
}

#[derive(Debug, Clone)]
pub struct BinaryClOutput {
    pub loss: f64,
    /// `dL/d alpha'` and `dL/d alpha''`, laid out like [`AugmentedViews::alpha`].
    pub grad_alpha: [Vec<f64>; 2],
    /// `dL/dQ` for the batch nodes (alpha entries unused).
    pub code_grads: CodeGrads,
}

/// InfoNCE between the two rescaled binary views:
/// logits `(1/sigma) sum_l a'_x^(l) a''_y^(l) Q_x^(l) . Q_y^(l)`.
///
/// Code gradients are only accumulated when `with_code_grads` is set.
pub fn cl_loss_binary(
    views: &AugmentedViews,
    codes: &dyn CodeSource,
    sigma: f64,
    with_code_grads: bool,
) -> Result<BinaryClOutput> {
    check_sigma(sigma)?;
    let b = views.len();
    let segs = views.segments;
    let dim = views.dim;
    if codes.segments() != segs || codes.dim() != dim {
        return Err(Error::Shape("views and codes disagree on layout".into()));
    }
    let mut grad_alpha = [vec![0.0; b * segs], vec![0.0; b * segs]];
    let mut code_grads = CodeGrads::new(segs, dim);
    if b < 2 {
        log::debug!("contrastive batch of {b} node(s); loss is zero");
        return Ok(BinaryClOutput {
            loss: 0.0,
            grad_alpha,
            code_grads,
        });
    }

    // dots[l][x][y] = Q_x . Q_y
    let mut dots = vec![0.0; segs * b * b];
    for l in 0..segs {
        for x in 0..b {
            for y in x..b {
                let d = codes.code_dot(views.nodes[x], views.nodes[y], l);
                dots[(l * b + x) * b + y] = d;
                dots[(l * b + y) * b + x] = d;
            }
        }
    }
    let mut coef = vec![0.0; b * b];
    for x in 0..b {
        let a1 = views.alphas(0, x);
        for y in 0..b {
            let a2 = views.alphas(1, y);
            coef[x * b + y] = (0..segs)
                .map(|l| a1[l] * a2[l] * dots[(l * b + x) * b + y])
                .sum::<f64>()
                / sigma;
        }
    }
    let loss = info_nce_in_place(&mut coef, b);

    let [ga1, ga2] = &mut grad_alpha;
    let mut wts = vec![0.0; b * b];
    let mut q = vec![0.0; b * dim];
    for l in 0..segs {
        for x in 0..b {
            let a1 = views.alphas(0, x)[l];
            for y in 0..b {
                let a2 = views.alphas(1, y)[l];
                let c = coef[x * b + y] / sigma;
                let d = dots[(l * b + x) * b + y];
                ga1[x * segs + l] += c * a2 * d;
                ga2[y * segs + l] += c * a1 * d;
                wts[x * b + y] = c * a1 * a2;
            }
        }
        if !with_code_grads {
            continue;
        }
        for (m, qm) in q.chunks_exact_mut(dim).enumerate() {
            codes.code_into(views.nodes[m], l, qm);
        }
        // dQ_n = sum_m (w_nm + w_mn) Q_m
        for n in 0..b {
            let acc = code_grads.code_mut(views.nodes[n], l);
            for (m, qm) in q.chunks_exact(dim).enumerate() {
                axpy(wts[n * b + m] + wts[m * b + n], qm, acc);
            }
        }
    }
    Ok(BinaryClOutput {
        loss,
        grad_alpha,
        code_grads,
    })
}

fn check_sigma(sigma: f64) -> Result<()> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidArgument(format!("sigma must be positive, got {sigma}")));
    }
    Ok(())
}

/// `sum_{rows} |V0_row|^2`.
pub fn regularization<T: Real>(v0: &Matrix<T>, rows: &[usize]) -> f64 {
    rows.iter()
        .map(|&r| v0.row(r).iter().map(|v| v.f64() * v.f64()).sum::<f64>())
        .sum()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub bpr: f64,
    pub cl1: f64,
    pub cl2: f64,
    pub reg: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_bpr: f64,
    pub l_cl1: f64,
    pub l_cl2: f64,
    pub l_reg: f64,
    pub l_total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.l_bpr, self.l_cl1, self.l_cl2, self.l_reg, self.l_total]
            .iter()
            .all(|v| v.is_finite())
    }

    pub fn accumulate(&mut self, other: &LossBreakdown) {
        self.l_bpr += other.l_bpr;
        self.l_cl1 += other.l_cl1;
        self.l_cl2 += other.l_cl2;
        self.l_reg += other.l_reg;
        self.l_total += other.l_total;
    }
}

/// `bpr + lambda1 (cl1 + cl2) + lambda2 reg`.
pub fn total_loss(parts: LossParts, lambda1: f64, lambda2: f64) -> LossBreakdown {
    LossBreakdown {
        l_bpr: parts.bpr,
        l_cl1: parts.cl1,
        l_cl2: parts.cl2,
        l_reg: parts.reg,
        l_total: parts.bpr + lambda1 * (parts.cl1 + parts.cl2) + lambda2 * parts.reg,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table_1x1(dim: usize, qx: u64, qy: u64) -> HashTable {
        HashTable::from_parts(1, 1, dim, 0, vec![1.0, 1.0], vec![qx, qy]).unwrap()
    }

    #[test]
    fn total_loss_examples() {
        let parts = LossParts {
            bpr: 1.0,
            cl1: 0.5,
            cl2: 0.5,
            reg: 100.0,
        };
        assert_eq!(total_loss(parts, 0.0, 0.0).l_total, 1.0);
        assert_eq!(total_loss(LossParts::default(), 0.3, 0.2).l_total, 0.0);
        assert!((total_loss(parts, 1e-2, 1e-5).l_total - 1.011).abs() < 1e-12);
    }

    #[test]
    fn bpr_symmetric_and_saturated() {
        // user 0, items 0 and 1 with identical codes -> equal scores
        let t = HashTable::from_parts(1, 2, 4, 0, vec![1.0; 3], vec![0b1011, 0b0001, 0b0001]).unwrap();
        let batch = TrainBatch {
            n1: 1,
            triples: vec![Triple { user: 0, pos: 0, neg: 1 }],
        };
        let out = bpr_loss(&batch, &t).unwrap();
        assert!((out.loss - std::f64::consts::LN_2).abs() < 1e-12);

        // score gap of 64 saturates at the clamp
        let t = HashTable::from_parts(1, 2, 64, 0, vec![1.0, 0.5, 0.5], vec![u64::MAX, u64::MAX, 0]).unwrap();
        let out = bpr_loss(&batch, &t).unwrap();
        assert!(out.loss < 1e-15);
        assert!(out.loss.is_finite());
        assert!(bpr_loss(&TrainBatch { n1: 1, triples: vec![] }, &t).is_err());
    }

    #[test]
    fn bpr_monotone_in_positive_score() {
        let mut d = DenseCodes::from_table(&HashTable::from_parts(
            1,
            2,
            4,
            0,
            vec![1.0, 0.5, 0.5],
            vec![0b1011, 0b0011, 0b0100],
        )
        .unwrap());
        let batch = TrainBatch {
            n1: 1,
            triples: vec![Triple { user: 0, pos: 0, neg: 1 }],
        };
        let mut last = f64::INFINITY;
        for k in 0..10 {
            *d.alpha_mut(1, 0) = 0.1 + 0.2 * k as f64;
            let loss = bpr_loss(&batch, &d).unwrap().loss;
            assert!(loss < last);
            last = loss;
        }
    }

    #[test]
    fn hash_and_dense_sources_agree() {
        let t = table_1x1(4, 0b1011, 0b0001);
        let d = DenseCodes::from_table(&t);
        assert_eq!(CodeSource::code_dot(&t, 0, 1, 0), 0.0);
        assert_eq!(d.code_dot(0, 1, 0), 0.0);
        assert_eq!(CodeSource::code_dot(&t, 0, 0, 0), 4.0);
        assert_eq!(CodeSource::score(&t, 0, 1), d.score(0, 1));
    }

    fn views_from(cont: [Vec<Vec<f64>>; 2], alpha: [Vec<Vec<f64>>; 2], nodes: Vec<usize>, segments: usize) -> AugmentedViews {
        let dim = cont[0][0].len() / segments;
        AugmentedViews {
            nodes,
            segments,
            dim,
            cont: [cont[0].concat(), cont[1].concat()],
            alpha: [alpha[0].concat(), alpha[1].concat()],
        }
    }

    #[test]
    fn single_node_contrast_is_zero() {
        let v = views_from(
            [vec![vec![1.0, 2.0]], vec![vec![0.5, 0.1]]],
            [vec![vec![0.3]], vec![vec![0.9]]],
            vec![0],
            1,
        );
        let out = cl_loss_continuous(&v, 0.2).unwrap();
        assert_eq!(out.loss, 0.0);
        assert!(out.grad[0].iter().all(|&g| g == 0.0));
        let t = table_1x1(2, 0b01, 0b10);
        let out = cl_loss_binary(&v, &t, 0.2, true).unwrap();
        assert_eq!(out.loss, 0.0);
    }

    #[test]
    fn uniform_softmax_gives_ln2() {
        // V'_1 . V''_1 == V'_1 . V''_2
        let v = views_from(
            [vec![vec![1.0, 0.0], vec![0.0, 1.0]], vec![vec![0.5, 0.3], vec![0.5, -0.7]]],
            [vec![vec![1.0], vec![1.0]], vec![vec![1.0], vec![1.0]]],
            vec![0, 1],
            1,
        );
        let out = cl_loss_continuous(&v, 0.2).unwrap();
        let second = {
            let s: [f64; 2] = [0.3 / 0.2, -0.7 / 0.2];
            let m = s[0].max(s[1]);
            m + ((s[0] - m).exp() + (s[1] - m).exp()).ln() - s[1]
        };
        assert!((out.loss - (std::f64::consts::LN_2 + second)).abs() < 1e-12);
        assert!(cl_loss_continuous(&v, 0.0).is_err());
    }

    #[test]
    fn self_similarity_is_full_width() {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let t = HashTable::random(3, 3, 100, 2, &mut rng);
        for n in 0..6 {
            for l in 0..3 {
                assert_eq!(CodeSource::code_dot(&t, n, n, l), 100.0);
            }
        }
    }

    #[test]
    fn batch_helpers() {
        let b = TrainBatch {
            n1: 3,
            triples: vec![
                Triple { user: 0, pos: 1, neg: 2 },
                Triple { user: 0, pos: 2, neg: 1 },
                Triple { user: 2, pos: 1, neg: 0 },
            ],
        };
        assert_eq!(b.touched(), vec![0, 4, 5, 2, 3]);
        assert_eq!(b.contrast_groups(), [vec![0, 2], vec![4, 5]]);
        let g = BipartiteGraph::from_edges(3, 3, [(0, 1), (0, 2), (2, 1)]).unwrap();
        assert!(b.validate(&g).is_err());
        let ok = TrainBatch {
            n1: 3,
            triples: vec![Triple { user: 0, pos: 1, neg: 0 }],
        };
        assert!(ok.validate(&g).is_ok());
    }
}
