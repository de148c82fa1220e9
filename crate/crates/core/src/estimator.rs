//! Gradient estimators for `sign(.)` and the adjoint of the propagation stack.
//!
//! The forward pass always uses the exact sign. Backward uses one of:
//!
//! * `fourier`: derivative of the truncated square-wave series,
//!   `(4/H) sum_{i odd <= n} cos(pi i phi / H)`;
//! * `ste`: identity clipped to `|phi| <= 1`;
//! * `tanh`: `beta (1 - tanh^2(beta phi))`.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::NormalizedOperator;
use crate::linalg::{Matrix, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorKind {
    Fourier,
    Ste,
    Tanh,
}

impl FromStr for EstimatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fourier" => Ok(Self::Fourier),
            "ste" => Ok(Self::Ste),
            "tanh" => Ok(Self::Tanh),
            other => Err(Error::Config {
                key: "estimator.kind".into(),
                msg: format!("unknown estimator {other:?}"),
            }),
        }
    }
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Fourier => "fourier",
            Self::Ste => "ste",
            Self::Tanh => "tanh",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorConfig {
    pub kind: EstimatorKind,
    /// Largest odd harmonic index is the largest odd number `<= n`.
    pub n: usize,
    /// Half period of the square wave.
    pub h: f64,
    pub tanh_beta: f64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            kind: EstimatorKind::Fourier,
            n: 16,
            h: 1.0,
            tanh_beta: 1.0,
        }
    }
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Config {
                key: "estimator.n".into(),
                msg: "must be at least 1".into(),
            });
        }
        if !(self.h > 0.0 && self.h.is_finite()) {
            return Err(Error::Config {
                key: "estimator.h".into(),
                msg: "must be positive".into(),
            });
        }
        if !(self.tanh_beta > 0.0 && self.tanh_beta.is_finite()) {
            return Err(Error::Config {
                key: "estimator.tanh_beta".into(),
                msg: "must be positive".into(),
            });
        }
        Ok(())
    }

    /// Local derivative `d sign(phi) / d phi` under this estimator.
    #[inline]
    pub fn local_grad(&self, phi: f64) -> f64 {
        match self.kind {
            EstimatorKind::Fourier => fourier_grad(phi, self.n, self.h),
            EstimatorKind::Ste => {
                if phi.abs() <= 1.0 {
                    1.0
                } else {
                    0.0
                }
            }
            EstimatorKind::Tanh => {
                let t = (self.tanh_beta * phi).tanh();
                self.tanh_beta * (1.0 - t * t)
            }
        }
    }
}

/// Exact sign with `sign(0) = +1`.
#[inline]
pub fn sign_forward(phi: f64) -> f64 {
    if phi >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// `(4/pi) sum_{i odd <= n} sin(pi i phi / H) / i`.
pub fn fourier_approx(phi: f64, n: usize, h: f64) -> f64 {
    let s: f64 = (1..=n)
        .step_by(2)
        .map(|i| {
            let i = i as f64;
            (PI * i * phi / h).sin() / i
        })
        .sum();
    4.0 / PI * s
}

/// `(4/H) sum_{i odd <= n} cos(pi i phi / H)`, the derivative of [`fourier_approx`].
pub fn fourier_grad(phi: f64, n: usize, h: f64) -> f64 {
    // cos((i + 2) t) = 2 cos(2t) cos(i t) - cos((i - 2) t)
    let t = PI * phi / h;
    let c1 = t.cos();
    let two_c2 = 2.0 * (2.0 * c1 * c1 - 1.0);
    let (mut prev, mut cur) = (c1, c1);
    let mut s = 0.0;
    for _ in (1..=n).step_by(2) {
        s += cur;
        let next = two_c2 * cur - prev;
        prev = cur;
        cur = next;
    }
    4.0 / h * s
}

#[inline]
pub fn sign_backward(phi: f64, upstream: f64, cfg: &EstimatorConfig) -> f64 {
    upstream * cfg.local_grad(phi)
}

/// Pulls per-layer gradients `dL/dV^(l)` back to `dL/dV^(0)` through
/// `V^(l+1) = Â V^(l)`, using `Â^T = Â`.
pub fn backprop<T: Real>(op: &NormalizedOperator, layer_grads: &[Matrix<T>]) -> Result<Matrix<T>> {
    let (last, rest) = layer_grads
        .split_last()
        .ok_or_else(|| Error::Shape("no layer gradients supplied".into()))?;
    let mut acc = last.clone();
    for g in rest.iter().rev() {
        let mut pulled = op.propagate(&acc)?;
        pulled.add_assign(g)?;
        acc = pulled;
    }
    Ok(acc)
}
