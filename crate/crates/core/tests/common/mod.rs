//! Shared fixtures for integration tests: small random instances, a float64
//! relaxed model, and central finite differences.
#![allow(dead_code)]

use graphhash::estimator::{fourier_approx, fourier_grad};
use graphhash::graph::{normalize, BipartiteGraph, NormalizedOperator};
use graphhash::linalg::Matrix;
use graphhash::model::{assemble, forward};
use graphhash::objective::{DenseCodes, LossBreakdown, TrainBatch, Triple};
use graphhash::train::{batch_gradient, LossConfig, StepNoise};
use graphhash::augment::AugmentConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `|a - b| <= tol * max(|a|, |b|) + floor`.
pub fn close(a: f64, b: f64, tol: f64, floor: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()) + floor
}

/// Five-point central difference of `f` along each coordinate of `x`.
pub fn numeric_grad(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut p = x.to_vec();
    let mut at = |p: &mut Vec<f64>, i: usize, t: f64| {
        p[i] = x[i] + t;
        let v = f(p);
        p[i] = x[i];
        v
    };
    (0..x.len())
        .map(|i| {
            let (a, b) = (at(&mut p, i, h), at(&mut p, i, -h));
            let (c, d) = (at(&mut p, i, 2.0 * h), at(&mut p, i, -2.0 * h));
            (8.0 * (a - b) - (c - d)) / (12.0 * h)
        })
        .collect()
}

/// Worst entrywise relative error; entries are measured against
/// `max(|a|, |n|, floor * max|n|)`.
pub fn worst_rel(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs())) * floor;
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(scale).max(f64::MIN_POSITIVE))
        .fold(0.0, f64::max)
}

/// Random bipartite graph where every V1 node has at least one neighbor and
/// at least one non-neighbor.
pub fn random_graph(n1: usize, n2: usize, r: &mut ChaCha8Rng) -> BipartiteGraph {
    assert!(n2 >= 2);
    let mut edges = Vec::new();
    for u in 0..n1 {
        let mut row: Vec<bool> = (0..n2).map(|_| r.random::<bool>()).collect();
        if !row.iter().any(|&b| b) {
            row[r.random_range(0..n2)] = true;
        }
        if row.iter().all(|&b| b) {
            row[r.random_range(0..n2)] = false;
        }
        edges.extend(row.iter().enumerate().filter(|(_, &b)| b).map(|(v, _)| (u, v)));
    }
    BipartiteGraph::from_edges(n1, n2, edges).unwrap()
}

pub fn random_batch(g: &BipartiteGraph, triples: usize, r: &mut ChaCha8Rng) -> TrainBatch {
    let mut out = Vec::new();
    while out.len() < triples {
        let u = r.random_range(0..g.n1());
        let pos: Vec<usize> = g.items_of(u).collect();
        let neg: Vec<usize> = (0..g.n2()).filter(|v| !g.has_edge(u, *v)).collect();
        out.push(Triple {
            user: u,
            pos: pos[r.random_range(0..pos.len())],
            neg: neg[r.random_range(0..neg.len())],
        });
    }
    TrainBatch { n1: g.n1(), triples: out }
}

pub const FLOOR: f64 = 1e-3;

/// A micro training problem evaluated with relaxed codes `fourier_approx(V)`.
pub struct Micro {
    pub graph: BipartiteGraph,
    pub op: NormalizedOperator,
    pub layers: usize,
    pub v0: Matrix<f64>,
    pub batch: TrainBatch,
    pub noise: StepNoise,
    pub loss: LossConfig,
    pub rescale: bool,
    pub n: usize,
    pub h: f64,
}

impl Micro {
    /// At most 10 nodes, `d <= 32`, `L <= 2`. Entries of every layer stay at
    /// least `margin` away from zero so the L1 factor is smooth nearby.
    pub fn random(seed: u64, margin: f64) -> Self {
        let mut r = rng(seed);
        loop {
            let n1 = r.random_range(2..=5);
            let n2 = r.random_range(2..=5);
            let dim = [4, 8, 16, 32][r.random_range(0..4)];
            let layers = r.random_range(0..=2);
            let graph = random_graph(n1, n2, &mut r);
            let op = normalize(&graph);
            let v0 = Matrix::<f64>::random_normal(n1 + n2, dim, 0.1, &mut r);
            let states = forward(&op, &v0, layers).unwrap();
            let smooth = states
                .layers
                .iter()
                .all(|m| m.as_slice().iter().all(|v| v.abs() > margin));
            if !smooth {
                continue;
            }
            let batch = random_batch(&graph, r.random_range(1..=4), &mut r);
            let table = assemble(&states, n1, true).unwrap();
            let aug = AugmentConfig {
                tau: 0.1,
                seed: seed ^ 0xabc,
                ..Default::default()
            };
            let noise = StepNoise::draw(&table, &batch, &aug, 0).unwrap();
            let loss = LossConfig {
                lambda1: 0.3,
                lambda2: 0.05,
                sigma: 0.5,
                binary_code_grad: true,
                ..Default::default()
            };
            return Self {
                graph,
                op,
                layers,
                v0,
                batch,
                noise,
                loss,
                rescale: true,
                n: 4,
                h: 1.0,
            };
        }
    }

    pub fn eval(&self, v0: &Matrix<f64>) -> (LossBreakdown, Matrix<f64>) {
        let states = forward(&self.op, v0, self.layers).unwrap();
        let (n, h) = (self.n, self.h);
        let codes = DenseCodes::from_states(&states, |v| fourier_approx(v, n, h), self.rescale);
        batch_gradient(
            &self.op,
            &states,
            &codes,
            &self.batch,
            Some(&self.noise),
            &self.loss,
            self.rescale,
            &|v| fourier_grad(v, n, h),
        )
        .unwrap()
    }

    /// Worst relative deviation between the analytic `dL/dV0` and central differences.
    pub fn check(&self, step: f64) -> f64 {
        let (_, analytic) = self.eval(&self.v0);
        let (rows, cols) = (self.v0.rows(), self.v0.cols());
        let numeric = numeric_grad(self.v0.as_slice(), step, |x| {
            let m = Matrix::from_vec(rows, cols, x.to_vec()).unwrap();
            self.eval(&m).0.l_total
        });
        worst_rel(analytic.as_slice(), &numeric, FLOOR)
    }
}
