//! Forward pass: layer-0 embeddings, `L` rounds of normalized propagation, and
//! per-layer sign hashing with L1 rescaling factors.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::NormalizedOperator;
use crate::linalg::{Matrix, Real};
use crate::table::{pack_signs, HashTable};

pub const MAX_LAYERS: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Code bits per layer.
    pub dim: usize,
    /// Propagation rounds `L`; the table holds `L + 1` segments.
    pub layers: usize,
    pub init_scale: f64,
    pub seed: u64,
    /// When false every rescaling factor is pinned to 1.
    pub rescale: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            layers: 2,
            init_scale: 0.1,
            seed: 0,
            rescale: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Config {
                key: "model.d".into(),
                msg: "must be positive".into(),
            });
        }
        if !(1..=MAX_LAYERS).contains(&self.layers) {
            return Err(Error::Config {
                key: "model.layers".into(),
                msg: format!("must lie in 1..={MAX_LAYERS}, got {}", self.layers),
            });
        }
        if !(self.init_scale > 0.0 && self.init_scale.is_finite()) {
            return Err(Error::Config {
                key: "model.init_scale".into(),
                msg: "must be positive".into(),
            });
        }
        if !self.dim.is_multiple_of(64) {
            log::info!("model.d={} is not a multiple of 64; trailing bits are padded", self.dim);
        }
        Ok(())
    }
}

/// Normal(0, init_scale) layer-0 embeddings for `nodes` rows.
pub fn init_embeddings(nodes: usize, cfg: &ModelConfig) -> Matrix<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    Matrix::random_normal(nodes, cfg.dim, cfg.init_scale, &mut rng)
}

/// Layer-wise embeddings `V^(0..=L)` with `V^(l+1) = Â V^(l)`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingState<T> {
    pub layers: Vec<Matrix<T>>,
}

impl<T: Real> EmbeddingState<T> {
    pub fn depth(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn nodes(&self) -> usize {
        self.layers[0].rows()
    }

    pub fn dim(&self) -> usize {
        self.layers[0].cols()
    }
}

pub fn forward<T: Real>(op: &NormalizedOperator, v0: &Matrix<T>, layers: usize) -> Result<EmbeddingState<T>> {
    if !v0.is_finite() {
        return Err(Error::NonFinite("layer 0 embeddings".into()));
    }
    let mut out = Vec::with_capacity(layers + 1);
    out.push(v0.clone());
    for l in 0..layers {
        let next = op.propagate(&out[l])?;
        if !next.is_finite() {
            return Err(Error::NonFinite(format!("layer {} embeddings", l + 1)));
        }
        out.push(next);
    }
    Ok(EmbeddingState { layers: out })
}

/// Sign code (bit set for non-negative entries) and `|v|_1 / d`.
pub fn hash_layer<T: Real>(row: &[T]) -> (Vec<u64>, f64) {
    let l1: f64 = row.iter().map(|v| v.f64().abs()).sum();
    (pack_signs(row), l1 / row.len() as f64)
}

/// `d alpha / d v_i = sign(v_i) / d`, with `sign(0) = +1`.
#[inline]
pub fn alpha_grad<T: Real>(v: T, dim: usize) -> f64 {
    if v >= T::zero() {
        1.0 / dim as f64
    } else {
        -1.0 / dim as f64
    }
}

/// Hashes every layer of every node into a table. `rescale = false` pins all
/// factors to 1.
pub fn assemble<T: Real>(states: &EmbeddingState<T>, n1: usize, rescale: bool) -> Result<HashTable> {
    let nodes = states.nodes();
    if n1 > nodes {
        return Err(Error::Shape(format!("n1={n1} exceeds {nodes} rows")));
    }
    let dim = states.dim();
    let layers = states.layers.len();
    let words = dim.div_ceil(64);
    let mut alphas = Vec::with_capacity(nodes * layers);
    let mut codes = Vec::with_capacity(nodes * layers * words);
    for node in 0..nodes {
        for layer in &states.layers {
            let (bits, alpha) = hash_layer(layer.row(node));
            alphas.push(if rescale { alpha as f32 } else { 1.0 });
            codes.extend_from_slice(&bits);
        }
    }
    HashTable::from_parts(n1, nodes - n1, dim, layers - 1, alphas, codes)
}
