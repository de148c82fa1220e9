//! Latent feature dispersion: a rank-1 spectral damping `V (I - eps P)` with
//! `P = p p^T / |p|^2`, where `p` comes from a few power iterations of `V^T V`.
//!
//! Applied once to the layer-0 embeddings before training, when enabled.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Matrix, Real};

const RESCALE_ABOVE: f64 = 1e100;
const RESCALE_BELOW: f64 = 1e-100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DispersionConfig {
    pub enabled: bool,
    pub epsilon: f64,
    pub k: usize,
    pub seed: u64,
}

impl Default for DispersionConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            epsilon: 0.1,
            k: 2,
            seed: 0,
        }
    }
}

impl DispersionConfig {
    pub fn validate(&self, layers: usize) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::Config {
                key: "dispersion.epsilon".into(),
                msg: format!("must lie in (0, 1), got {}", self.epsilon),
            });
        }
        if self.k == 0 {
            return Err(Error::Config {
                key: "dispersion.k".into(),
                msg: "must be at least 1".into(),
            });
        }
        if self.enabled && self.k > layers.max(1) {
            return Err(Error::Config {
                key: "dispersion.k".into(),
                msg: format!("must not exceed the layer count {layers}"),
            });
        }
        Ok(())
    }
}

/// `p^(K)` with `p^(0) ~ N(0, I)` drawn from `seed` and `p^(k) = V^T V p^(k-1)`.
///
/// The iterate is only rescaled when its norm leaves `[1e-100, 1e100]`; the
/// projector built from it is scale invariant.
pub fn dispersing_vector<T: Real>(v: &Matrix<T>, k: usize, seed: u64) -> Result<Vec<f64>> {
    if v.cols() == 0 {
        return Err(Error::InvalidArgument("embedding matrix has no columns".into()));
    }
    if v.as_slice().iter().all(|x| *x == T::zero()) {
        return Err(Error::Degenerate("cannot disperse an all-zero matrix".into()));
    }
    let v = v.cast::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p: Vec<f64> = (0..v.cols()).map(|_| StandardNormal.sample(&mut rng)).collect();
    for _ in 0..k {
        let vp = v.matvec(&p)?;
        p = v.tmatvec(&vp)?;
        let norm = p.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::Degenerate(
                "power iteration collapsed to the zero vector".into(),
            ));
        }
        if !(RESCALE_BELOW..=RESCALE_ABOVE).contains(&norm) {
            p.iter_mut().for_each(|x| *x /= norm);
        }
    }
    Ok(p)
}

/// The rank-1 orthogonal projector onto `span(p)`.
pub fn projector(p: &[f64]) -> Matrix<f64> {
    let nn: f64 = p.iter().map(|x| x * x).sum();
    let c = p.len();
    let mut m = Matrix::zeros(c, c);
    for i in 0..c {
        for j in 0..c {
            m.set(i, j, p[i] * p[j] / nn);
        }
    }
    m
}

/// `V (I - eps P)` evaluated row by row as `r - eps (r . p_hat) p_hat`.
pub fn disperse_along<T: Real>(v: &Matrix<T>, p: &[f64], epsilon: f64) -> Result<Matrix<T>> {
    if p.len() != v.cols() {
        return Err(Error::Shape(format!(
            "dispersing vector has length {}, embeddings have {} columns",
            p.len(),
            v.cols()
        )));
    }
    let norm = p.iter().map(|x| x * x).sum::<f64>().sqrt();
    let unit: Vec<f64> = p.iter().map(|x| x / norm).collect();
    let mut out = Matrix::zeros(v.rows(), v.cols());
    for i in 0..v.rows() {
        let row = v.row(i);
        let proj: f64 = row.iter().zip(&unit).map(|(a, b)| a.f64() * b).sum();
        for (o, (&r, &u)) in out.row_mut(i).iter_mut().zip(row.iter().zip(&unit)) {
            *o = T::of(r.f64() - epsilon * proj * u);
        }
    }
    Ok(out)
}

pub fn disperse<T: Real>(v: &Matrix<T>, cfg: &DispersionConfig) -> Result<Matrix<T>> {
    let p = dispersing_vector(v, cfg.k, cfg.seed)?;
    disperse_along(v, &p, cfg.epsilon)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;
    use rand::Rng;

    fn to_na(m: &Matrix<f64>) -> DMatrix<f64> {
        DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice())
    }

    fn random_orthonormal(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        let g = DMatrix::from_fn(rows, cols, |_, _| rng.random::<f64>() - 0.5);
        g.qr().q()
    }

    /// 5x3 matrix with singular values (10, 1, 0.5) and its right singular vectors.
    fn planted_spectrum(seed: u64) -> (Matrix<f64>, DMatrix<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u = random_orthonormal(5, 3, &mut rng);
        let w = random_orthonormal(3, 3, &mut rng);
        let s = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![10.0, 1.0, 0.5]));
        let m = &u * s * w.transpose();
        let rows: Vec<Vec<f64>> = (0..5).map(|i| (0..3).map(|j| m[(i, j)]).collect()).collect();
        (Matrix::from_rows(&rows).unwrap(), w)
    }

    fn singular_values(m: &Matrix<f64>) -> Vec<f64> {
        let mut s: Vec<f64> = to_na(m).singular_values().iter().copied().collect();
        s.sort_by(|a, b| b.partial_cmp(a).unwrap());
        s
    }

    #[test]
    fn identity_is_a_fixed_point() {
        let v = Matrix::<f64>::identity(4);
        let p = dispersing_vector(&v, 3, 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p0: Vec<f64> = (0..4).map(|_| StandardNormal.sample(&mut rng)).collect();
        assert_eq!(p, p0);
    }

    #[test]
    fn all_zero_is_rejected() {
        let v = Matrix::<f32>::zeros(4, 3);
        assert!(matches!(dispersing_vector(&v, 2, 0), Err(Error::Degenerate(_))));
    }

    #[test]
    fn converges_towards_top_singular_vector() {
        let (v, w) = planted_spectrum(11);
        let top: Vec<f64> = (0..3).map(|i| w[(i, 0)]).collect();
        let mut last = f64::INFINITY;
        for k in 1..=5 {
            let p = dispersing_vector(&v, k, 4).unwrap();
            let n = p.iter().map(|x| x * x).sum::<f64>().sqrt();
            let cos = p.iter().zip(&top).map(|(a, b)| a * b).sum::<f64>().abs() / n;
            let angle = cos.min(1.0).acos();
            assert!(angle < last || angle < 1e-12, "k={k}: {angle} !< {last}");
            last = angle;
        }
    }

    #[test]
    fn tiny_epsilon_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v = Matrix::<f64>::random_normal(6, 4, 1.0, &mut rng);
        let cfg = DispersionConfig {
            enabled: true,
            epsilon: 1e-9,
            k: 2,
            seed: 3,
        };
        let out = disperse(&v, &cfg).unwrap();
        assert!(out.max_abs_diff(&v).unwrap() < 1e-6);
    }

    #[test]
    fn projector_is_idempotent_and_symmetric() {
        let p = vec![0.3, -1.2, 2.0, 0.01];
        let m = projector(&p);
        let m2 = m.matmul(&m).unwrap();
        assert!(m2.max_abs_diff(&m).unwrap() < 1e-12);
        assert!(m.transpose().max_abs_diff(&m).unwrap() < 1e-15);
    }

    #[test]
    fn damps_the_top_singular_value_only() {
        let (v, _) = planted_spectrum(5);
        let before = singular_values(&v);
        assert!((before[0] - 10.0).abs() < 1e-9 && (before[2] - 0.5).abs() < 1e-9);
        let cfg = DispersionConfig {
            enabled: true,
            epsilon: 0.5,
            k: 3,
            seed: 17,
        };
        let after = singular_values(&disperse(&v, &cfg).unwrap());
        assert!(after[0] < 10.0);
        assert!((after[2] - 0.5).abs() / 0.5 < 0.02, "{after:?}");
    }

    #[test]
    fn matches_explicit_projector_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let v = Matrix::<f64>::random_normal(7, 3, 1.0, &mut rng);
        let p = dispersing_vector(&v, 2, 1).unwrap();
        let mut m = Matrix::<f64>::identity(3);
        let proj = projector(&p);
        for i in 0..3 {
            for j in 0..3 {
                m.set(i, j, m.get(i, j) - 0.3 * proj.get(i, j));
            }
        }
        let want = v.matmul(&m).unwrap();
        let got = disperse_along(&v, &p, 0.3).unwrap();
        assert!(got.max_abs_diff(&want).unwrap() < 1e-12);
    }

    #[test]
    fn config_validation() {
        let mut cfg = DispersionConfig::default();
        assert!(cfg.validate(2).is_ok());
        cfg.epsilon = 1.0;
        assert!(cfg.validate(2).is_err());
        cfg.epsilon = 0.5;
        cfg.k = 0;
        assert!(cfg.validate(2).is_err());
        cfg.k = 3;
        cfg.enabled = true;
        assert!(cfg.validate(2).is_err());
    }
}
