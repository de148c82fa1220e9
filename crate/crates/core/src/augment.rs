//! Feature-level augmentation for the two contrastive objectives.
//!
//! Continuous views add a noise vector of norm `tau` lying in the orthant of
//! the node's sign code; binary views add scalar noise to the rescaling
//! factors and leave the codes untouched.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Real;
use crate::model::EmbeddingState;
use crate::objective::CodeSource;
use crate::table::HashTable;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlphaNoise {
    /// `U(0, 1)`.
    Uniform01,
    /// `U(-1/2, 1/2)`.
    Centered,
}

impl FromStr for AlphaNoise {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform01" => Ok(Self::Uniform01),
            "centered" => Ok(Self::Centered),
            other => Err(Error::Config {
                key: "cl.alpha_noise".into(),
                msg: format!("unknown noise {other:?}"),
            }),
        }
    }
}

impl fmt::Display for AlphaNoise {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Uniform01 => "uniform01",
            Self::Centered => "centered",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub tau: f64,
    pub seed: u64,
    pub alpha_noise: AlphaNoise,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            tau: 0.1,
            seed: 0,
            alpha_noise: AlphaNoise::Uniform01,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config {
                key: "cl.tau".into(),
                msg: format!("must be positive, got {}", self.tau),
            });
        }
        Ok(())
    }
}

/// Noise `eps` with `|eps|_2 = tau` and `sign(eps_i) = signs_i`.
pub fn orthant_noise<R: Rng + ?Sized>(signs: &[i8], tau: f64, rng: &mut R) -> Result<Vec<f64>> {
    if tau.is_nan() || tau <= 0.0 {
        return Err(Error::InvalidArgument(format!("tau must be positive, got {tau}")));
    }
    loop {
        let mut eps: Vec<f64> = signs.iter().map(|&s| rng.random::<f64>() * s as f64).collect();
        let norm = eps.iter().map(|e| e * e).sum::<f64>().sqrt();
        if norm > 0.0 {
            let k = tau / norm;
            eps.iter_mut().for_each(|e| *e *= k);
            return Ok(eps);
        }
    }
}

/// `v + eps` with `eps` from [`orthant_noise`].
pub fn perturb_embedding<T: Real, R: Rng + ?Sized>(
    v: &[T],
    signs: &[i8],
    tau: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if v.len() != signs.len() {
        return Err(Error::Shape(format!(
            "embedding has {} entries, code has {}",
            v.len(),
            signs.len()
        )));
    }
    let eps = orthant_noise(signs, tau, rng)?;
    Ok(v.iter().zip(eps).map(|(x, e)| x.f64() + e).collect())
}

pub fn scalar_noise<R: Rng + ?Sized>(kind: AlphaNoise, rng: &mut R) -> f64 {
    match kind {
        AlphaNoise::Uniform01 => rng.random::<f64>(),
        AlphaNoise::Centered => rng.random::<f64>() - 0.5,
    }
}

/// `alpha + u`, `u ~ U(0, 1)`.
pub fn perturb_alpha<R: Rng + ?Sized>(alpha: f64, rng: &mut R) -> f64 {
    alpha + scalar_noise(AlphaNoise::Uniform01, rng)
}

/// Seed for the stream owned by one `(step, node, view)` triple.
pub fn stream_seed(seed: u64, step: u64, node: usize, view: u8) -> u64 {
    let mut h = splitmix(seed ^ 0x5851_f42d_4c95_7f2d);
    h = splitmix(h ^ step);
    h = splitmix(h ^ node as u64);
    splitmix(h ^ u64::from(view))
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// The random draws behind one pair of views: two orthant noise vectors and
/// two scalar offsets per node and segment.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewNoise {
    pub nodes: Vec<usize>,
    pub segments: usize,
    pub dim: usize,
    /// `[view][node][segment][dim]`, flattened per view.
    pub eps: [Vec<f64>; 2],
    /// `[view][node][segment]`.
    pub rho: [Vec<f64>; 2],
}

impl ViewNoise {
    /// Draws noise for `nodes` (unified ids) using the orthants of `table`.
    pub fn draw(table: &HashTable, nodes: &[usize], cfg: &AugmentConfig, step: u64) -> Result<Self> {
        let segments = table.segments();
        let dim = table.dim();
        let mut eps = [
            Vec::with_capacity(nodes.len() * segments * dim),
            Vec::with_capacity(nodes.len() * segments * dim),
        ];
        let mut rho = [
            Vec::with_capacity(nodes.len() * segments),
            Vec::with_capacity(nodes.len() * segments),
        ];
        for &node in nodes {
            if node >= table.nodes() {
                return Err(Error::NodeOutOfRange {
                    node,
                    limit: table.nodes(),
                });
            }
            for view in 0..2u8 {
                let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, step, node, view));
                for l in 0..segments {
                    let signs = crate::table::unpack_signs(table.code(node, l), dim);
                    eps[view as usize].extend(orthant_noise(&signs, cfg.tau, &mut rng)?);
                    rho[view as usize].push(scalar_noise(cfg.alpha_noise, &mut rng));
                }
            }
        }
        Ok(Self {
            nodes: nodes.to_vec(),
            segments,
            dim,
            eps,
            rho,
        })
    }

    /// Adds the stored draws to the current embeddings and factors.
    pub fn apply<T: Real>(&self, states: &EmbeddingState<T>, codes: &dyn CodeSource) -> Result<AugmentedViews> {
        if states.layers.len() != self.segments || states.dim() != self.dim {
            return Err(Error::Shape(format!(
                "noise drawn for {} segments of width {}, state has {} of width {}",
                self.segments,
                self.dim,
                states.layers.len(),
                states.dim()
            )));
        }
        let width = self.segments * self.dim;
        let mut cont = [
            Vec::with_capacity(self.nodes.len() * width),
            Vec::with_capacity(self.nodes.len() * width),
        ];
        let mut alpha = [
            Vec::with_capacity(self.nodes.len() * self.segments),
            Vec::with_capacity(self.nodes.len() * self.segments),
        ];
        for (k, &node) in self.nodes.iter().enumerate() {
            for view in 0..2 {
                for l in 0..self.segments {
                    let row = states.layers[l].row(node);
                    let off = (k * self.segments + l) * self.dim;
                    let eps = &self.eps[view][off..off + self.dim];
                    cont[view].extend(row.iter().zip(eps).map(|(&x, &e)| x.f64() + e));
                    alpha[view].push(codes.alpha(node, l) + self.rho[view][k * self.segments + l]);
                }
            }
        }
        Ok(AugmentedViews {
            nodes: self.nodes.clone(),
            segments: self.segments,
            dim: self.dim,
            cont,
            alpha,
        })
    }
}

/// Two perturbed copies of each batch node's concatenated layer embeddings and
/// of its per-segment rescaling factors.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedViews {
    pub nodes: Vec<usize>,
    pub segments: usize,
    pub dim: usize,
    /// `[view][node][segment * dim]`.
    pub cont: [Vec<f64>; 2],
    /// `[view][node][segment]`.
    pub alpha: [Vec<f64>; 2],
}

impl AugmentedViews {
    #[inline]
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.segments * self.dim
    }

    /// Concatenated continuous view `view` of the `k`-th batch node.
    #[inline]
    pub fn continuous(&self, view: usize, k: usize) -> &[f64] {
        let w = self.width();
        &self.cont[view][k * w..(k + 1) * w]
    }

    #[inline]
    pub fn alphas(&self, view: usize, k: usize) -> &[f64] {
        &self.alpha[view][k * self.segments..(k + 1) * self.segments]
    }
}

/// Draws fresh noise for `batch` and applies it.
pub fn make_views<T: Real>(
    states: &EmbeddingState<T>,
    table: &HashTable,
    batch: &[usize],
    cfg: &AugmentConfig,
    step: u64,
) -> Result<AugmentedViews> {
    ViewNoise::draw(table, batch, cfg, step)?.apply(states, table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{normalize, BipartiteGraph};
    use crate::linalg::Matrix;
    use crate::model::{assemble, forward};

    fn fixture() -> (EmbeddingState<f32>, HashTable) {
        let g = BipartiteGraph::from_edges(3, 4, [(0, 0), (0, 1), (1, 2), (2, 3), (2, 0)]).unwrap();
        let op = normalize(&g);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let v0 = Matrix::<f32>::random_normal(7, 16, 0.1, &mut rng);
        let s = forward(&op, &v0, 1).unwrap();
        let t = assemble(&s, 3, true).unwrap();
        (s, t)
    }

    #[test]
    fn tiny_tau_barely_moves() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let v = [0.3f32, -0.4, 0.1];
        let out = perturb_embedding(&v, &[1, -1, 1], 1e-8, &mut rng).unwrap();
        for (o, x) in out.iter().zip(v) {
            assert!((o - x as f64).abs() < 1e-7);
        }
        assert!(perturb_embedding(&v, &[1, -1, 1], 0.0, &mut rng).is_err());
        assert!(perturb_embedding(&v, &[1, -1], 0.1, &mut rng).is_err());
    }

    #[test]
    fn positive_code_gives_positive_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let eps = orthant_noise(&[1; 32], 0.5, &mut rng).unwrap();
        assert!(eps.iter().all(|&e| e >= 0.0));
    }

    #[test]
    fn noise_norm_is_tau() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let signs: Vec<i8> = (0..24).map(|_| if rng.random::<bool>() { 1 } else { -1 }).collect();
            let eps = orthant_noise(&signs, 0.1, &mut rng).unwrap();
            let n = eps.iter().map(|e| e * e).sum::<f64>().sqrt();
            assert!((n - 0.1).abs() / 0.1 < 1e-5);
        }
    }

    #[test]
    fn alpha_noise_support() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let a = perturb_alpha(0.0, &mut rng);
            assert!((0.0..1.0).contains(&a));
            let b = perturb_alpha(1.25, &mut rng);
            assert!((1.25..2.25).contains(&b));
            let c = scalar_noise(AlphaNoise::Centered, &mut rng);
            assert!((-0.5..0.5).contains(&c));
        }
    }

    #[test]
    fn alpha_noise_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 100_000;
        let mean: f64 = (0..n).map(|_| perturb_alpha(0.7, &mut rng) - 0.7).sum::<f64>() / n as f64;
        assert!((mean - 0.5).abs() < 0.01, "{mean}");
    }

    #[test]
    fn single_node_depth_zero_counts() {
        let (s, t) = fixture();
        let s0 = EmbeddingState {
            layers: vec![s.layers[0].clone()],
        };
        let t0 = assemble(&s0, 3, true).unwrap();
        let v = make_views(&s0, &t0, &[2], &AugmentConfig::default(), 0).unwrap();
        assert_eq!(v.len(), 1);
        assert_eq!(v.cont[0].len(), 16);
        assert_eq!(v.cont[1].len(), 16);
        assert_eq!(v.alpha[0].len(), 1);
        assert_eq!(v.alpha[1].len(), 1);
        let _ = t;
    }

    #[test]
    fn same_seed_same_views() {
        let (s, t) = fixture();
        let cfg = AugmentConfig::default();
        let a = make_views(&s, &t, &[0, 4, 6], &cfg, 3).unwrap();
        let b = make_views(&s, &t, &[0, 4, 6], &cfg, 3).unwrap();
        assert_eq!(a, b);
        let c = make_views(&s, &t, &[0, 4, 6], &cfg, 4).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn per_node_streams_do_not_depend_on_batch_order() {
        let (s, t) = fixture();
        let cfg = AugmentConfig::default();
        let a = make_views(&s, &t, &[1, 5], &cfg, 9).unwrap();
        let b = make_views(&s, &t, &[5, 1], &cfg, 9).unwrap();
        assert_eq!(a.continuous(0, 0), b.continuous(0, 1));
        assert_eq!(a.alphas(1, 1), b.alphas(1, 0));
    }

    #[test]
    fn views_respect_constraints() {
        let (s, t) = fixture();
        let cfg = AugmentConfig::default();
        for step in 0..100 {
            let nodes: Vec<usize> = (0..7).collect();
            let v = make_views(&s, &t, &nodes, &cfg, step).unwrap();
            for (k, &node) in nodes.iter().enumerate() {
                let a = v.continuous(0, k);
                let b = v.continuous(1, k);
                let gap = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
                assert!(gap > 0.0);
                for l in 0..2 {
                    let row = s.layers[l].row(node);
                    let signs = crate::table::unpack_signs(t.code(node, l), 16);
                    for view in 0..2 {
                        let seg = &v.continuous(view, k)[l * 16..(l + 1) * 16];
                        let mut nn = 0.0;
                        for i in 0..16 {
                            let e = seg[i] - row[i] as f64;
                            assert!(e * signs[i] as f64 >= 0.0);
                            nn += e * e;
                        }
                        assert!((nn.sqrt() - 0.1).abs() < 1e-6);
                        let alpha = t.alpha(node, l) as f64;
                        let a = v.alphas(view, k)[l];
                        assert!(a >= alpha && a < alpha + 1.0);
                    }
                }
            }
        }
    }
}
