//! The training loop: per batch, forward, hash, augment, score, accumulate the
//! combined loss, push gradients back through the sign surrogate and the
//! propagation stack, and take an Adam step on the layer-0 embeddings.

use std::fmt;
use std::io::Write as _;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{stream_seed, AugmentConfig, ViewNoise};
use crate::dispersion::{disperse, DispersionConfig};
use crate::error::{Error, Result};
use crate::estimator::{backprop, EstimatorConfig, EstimatorKind};
use crate::graph::{normalize, BipartiteGraph, NormalizedOperator};
use crate::linalg::{Matrix, Real};
use crate::model::{alpha_grad, assemble, forward, init_embeddings, EmbeddingState, ModelConfig};
use crate::objective::{
    bpr_loss, cl_loss_binary, cl_loss_continuous, regularization, total_loss, CodeGrads, CodeSource, LossBreakdown,
    LossParts, TrainBatch, Triple,
};
use crate::optim::{Adam, AdamConfig};
use crate::table::HashTable;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub sigma: f64,
    /// Include the continuous-view contrastive term.
    pub cl1: bool,
    /// Include the binary-view contrastive term.
    pub cl2: bool,
    /// Let contrastive gradients on the perturbed factors reach `V` through `alpha`.
    pub grad_through_alpha: bool,
    /// Let binary-view contrastive gradients reach the codes (and `V` through the estimator).
    pub binary_code_grad: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda1: 5e-2,
            lambda2: 1e-5,
            sigma: 0.2,
            cl1: true,
            cl2: true,
            grad_through_alpha: true,
            binary_code_grad: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: String| Error::Config { key: key.into(), msg };
        if !(self.lambda1 >= 0.0 && self.lambda1.is_finite()) {
            return Err(bad("loss.lambda1", format!("must be non-negative, got {}", self.lambda1)));
        }
        if !(self.lambda2 >= 0.0 && self.lambda2.is_finite()) {
            return Err(bad("loss.lambda2", format!("must be non-negative, got {}", self.lambda2)));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(bad("cl.sigma", format!("must be positive, got {}", self.sigma)));
        }
        Ok(())
    }

    fn contrastive(&self) -> bool {
        self.lambda1 > 0.0 && (self.cl1 || self.cl2)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub dispersion: DispersionConfig,
    pub augment: AugmentConfig,
    pub estimator: EstimatorConfig,
    pub optim: AdamConfig,
    pub loss: LossConfig,
    pub epochs: usize,
    pub batch_size: usize,
    /// Shuffling and negative sampling.
    pub seed: u64,
    /// Negatives drawn per positive edge per epoch.
    pub neg_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            dispersion: DispersionConfig::default(),
            augment: AugmentConfig::default(),
            estimator: EstimatorConfig::default(),
            optim: AdamConfig::default(),
            loss: LossConfig::default(),
            epochs: 30,
            batch_size: 256,
            seed: 0,
            neg_samples: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.dispersion.validate(self.model.layers)?;
        self.augment.validate()?;
        self.estimator.validate()?;
        self.optim.validate()?;
        self.loss.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config {
                key: "train.batch_size".into(),
                msg: "must be positive".into(),
            });
        }
        if self.neg_samples == 0 {
            return Err(Error::Config {
                key: "train.neg_samples".into(),
                msg: "must be positive".into(),
            });
        }
        Ok(())
    }

    /// One seed for every random source: init, noise, dispersion, sampling.
    pub fn reseed(&mut self, seed: u64) {
        self.seed = seed;
        self.model.seed = seed;
        self.augment.seed = seed.wrapping_add(1);
        self.dispersion.seed = seed.wrapping_add(2);
    }
}

/// Ablation variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoCl1,
    NoCl2,
    NoCl,
    NoRescale,
    Ste,
    Tanh,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Full,
        Variant::NoCl1,
        Variant::NoCl2,
        Variant::NoCl,
        Variant::NoRescale,
        Variant::Ste,
        Variant::Tanh,
    ];

    pub fn apply(self, cfg: &TrainConfig) -> TrainConfig {
        let mut c = cfg.clone();
        match self {
            Variant::Full => {}
            Variant::NoCl1 => c.loss.cl1 = false,
            Variant::NoCl2 => c.loss.cl2 = false,
            Variant::NoCl => c.loss.lambda1 = 0.0,
            Variant::NoRescale => c.model.rescale = false,
            Variant::Ste => c.estimator.kind = EstimatorKind::Ste,
            Variant::Tanh => c.estimator.kind = EstimatorKind::Tanh,
        }
        c
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.to_string() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown variant {s:?}")))
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Full => "full",
            Variant::NoCl1 => "no_cl1",
            Variant::NoCl2 => "no_cl2",
            Variant::NoCl => "no_cl",
            Variant::NoRescale => "no_rescale",
            Variant::Ste => "ste",
            Variant::Tanh => "tanh",
        })
    }
}

/// Noise for the two contrastive groups of one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct StepNoise {
    pub groups: Vec<ViewNoise>,
}

impl StepNoise {
    pub fn draw(table: &HashTable, batch: &TrainBatch, cfg: &AugmentConfig, step: u64) -> Result<Self> {
        let groups = batch
            .contrast_groups()
            .iter()
            .map(|nodes| ViewNoise::draw(table, nodes, cfg, step))
            .collect::<Result<_>>()?;
        Ok(Self { groups })
    }
}

/// Loss and `dL/dV0` for one batch.
///
/// `codes` supplies factors and codes; `local_grad` is the derivative used
/// for each code entry with respect to its pre-sign value. With a
/// [`HashTable`] and an estimator this is a training step; with relaxed dense
/// codes and their exact derivative it is an ordinary differentiable function.
#[allow(clippy::too_many_arguments)]
pub fn batch_gradient<T: Real>(
    op: &NormalizedOperator,
    states: &EmbeddingState<T>,
    codes: &dyn CodeSource,
    batch: &TrainBatch,
    noise: Option<&StepNoise>,
    loss_cfg: &LossConfig,
    rescale: bool,
    local_grad: &dyn Fn(f64) -> f64,
) -> Result<(LossBreakdown, Matrix<T>)> {
    let dim = states.dim();
    let nodes = states.nodes();
    let segments = states.layers.len();
    let bpr = bpr_loss(batch, codes)?;
    let mut grads: CodeGrads = bpr.grads;
    let mut layer_grads: Vec<Matrix<f64>> = (0..segments).map(|_| Matrix::zeros(nodes, dim)).collect();
    let mut parts = LossParts {
        bpr: bpr.loss,
        ..Default::default()
    };

    let lambda1 = loss_cfg.lambda1;
    if let (Some(noise), true) = (noise, loss_cfg.contrastive()) {
        for group in &noise.groups {
            let views = group.apply(states, codes)?;
            if loss_cfg.cl1 {
                let c1 = cl_loss_continuous(&views, loss_cfg.sigma)?;
                parts.cl1 += c1.loss;
                for (k, &node) in views.nodes.iter().enumerate() {
                    for (l, lg) in layer_grads.iter_mut().enumerate() {
                        let r = k * views.width() + l * dim;
                        let (g1, g2) = (&c1.grad[0][r..r + dim], &c1.grad[1][r..r + dim]);
                        for ((o, a), b) in lg.row_mut(node).iter_mut().zip(g1).zip(g2) {
                            *o += lambda1 * (a + b);
                        }
                    }
                }
            }
            if loss_cfg.cl2 {
                let c2 = cl_loss_binary(&views, codes, loss_cfg.sigma, loss_cfg.binary_code_grad)?;
                parts.cl2 += c2.loss;
                if loss_cfg.grad_through_alpha {
                    for (k, &node) in views.nodes.iter().enumerate() {
                        for l in 0..segments {
                            let g = c2.grad_alpha[0][k * segments + l] + c2.grad_alpha[1][k * segments + l];
                            grads.add_alpha(node, l, lambda1 * g);
                        }
                    }
                }
                if loss_cfg.binary_code_grad {
                    grads.merge_scaled(&c2.code_grads, lambda1);
                }
            }
        }
    }

    for &node in grads.nodes() {
        for (l, lg) in layer_grads.iter_mut().enumerate() {
            let v = states.layers[l].row(node);
            let da = if rescale { grads.alpha(node, l) } else { 0.0 };
            let dq = grads.code(node, l).expect("node was touched");
            for ((o, &x), &q) in lg.row_mut(node).iter_mut().zip(v).zip(dq) {
                *o += q * local_grad(x.f64()) + da * alpha_grad(x, dim);
            }
        }
    }

    let layer_grads: Vec<Matrix<T>> = layer_grads.iter().map(|m| m.cast()).collect();
    let mut dv0 = backprop(op, &layer_grads)?;
    let touched = batch.touched();
    parts.reg = regularization(&states.layers[0], &touched);
    if loss_cfg.lambda2 > 0.0 {
        let k = 2.0 * loss_cfg.lambda2;
        for &r in &touched {
            let src: Vec<f64> = states.layers[0].row(r).iter().map(|v| v.f64()).collect();
            for (o, s) in dv0.row_mut(r).iter_mut().zip(src) {
                *o = T::of(o.f64() + k * s);
            }
        }
    }
    Ok((total_loss(parts, loss_cfg.lambda1, loss_cfg.lambda2), dv0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    /// 1-based.
    pub epoch: usize,
    pub batches: usize,
    /// Sums over the epoch's batches.
    pub loss: LossBreakdown,
}

/// Everything needed to continue training exactly where it stopped.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub epoch: usize,
    pub step: u64,
    pub v0: Matrix<f32>,
    pub adam_t: u64,
    pub adam_m: Vec<f32>,
    pub adam_v: Vec<f32>,
}

const CKPT_MAGIC: &[u8; 4] = b"GHCK";
const CKPT_VERSION: u32 = 1;

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let n = self.v0.as_slice().len();
        let mut out = Vec::with_capacity(48 + 12 * n);
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        for x in [
            self.epoch as u64,
            self.step,
            self.adam_t,
            self.v0.rows() as u64,
            self.v0.cols() as u64,
        ] {
            out.extend_from_slice(&x.to_le_bytes());
        }
        for buf in [self.v0.as_slice(), &self.adam_m, &self.adam_v] {
            for x in buf {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::Format(format!("checkpoint: {msg}"));
        if bytes.len() < 48 || &bytes[..4] != CKPT_MAGIC {
            return Err(bad("missing magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != CKPT_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let word = |i: usize| u64::from_le_bytes(bytes[8 + 8 * i..16 + 8 * i].try_into().unwrap());
        let (epoch, step, adam_t, rows, cols) = (word(0), word(1), word(2), word(3) as usize, word(4) as usize);
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| bad("dimensions overflow"))?;
        if bytes.len() != 48 + 12 * n {
            return Err(bad("length does not match dimensions"));
        }
        let floats = |k: usize| -> Vec<f32> {
            bytes[48 + 4 * n * k..48 + 4 * n * (k + 1)]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect()
        };
        Ok(Self {
            epoch: epoch as usize,
            step,
            v0: Matrix::from_vec(rows, cols, floats(0))?,
            adam_t,
            adam_m: floats(1),
            adam_v: floats(2),
        })
    }

    /// Writes via a temporary file and rename, so a crash never leaves a torn file.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

pub struct Trainer {
    cfg: TrainConfig,
    graph: BipartiteGraph,
    op: NormalizedOperator,
    v0: Matrix<f32>,
    adam: Adam,
    epoch: usize,
    step: u64,
    last_good: Checkpoint,
}

impl Trainer {
    pub fn new(graph: BipartiteGraph, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut v0 = init_embeddings(graph.num_nodes(), &cfg.model);
        if cfg.dispersion.enabled {
            v0 = disperse(&v0, &cfg.dispersion)?;
        }
        let adam = Adam::new(cfg.optim.clone(), v0.as_slice().len());
        let op = normalize(&graph);
        let mut t = Self {
            cfg,
            graph,
            op,
            v0,
            adam,
            epoch: 0,
            step: 0,
            last_good: Checkpoint {
                epoch: 0,
                step: 0,
                v0: Matrix::zeros(0, 0),
                adam_t: 0,
                adam_m: Vec::new(),
                adam_v: Vec::new(),
            },
        };
        t.last_good = t.checkpoint();
        Ok(t)
    }

    pub fn resume(graph: BipartiteGraph, cfg: TrainConfig, ckpt: Checkpoint) -> Result<Self> {
        let mut t = Self::new(graph, cfg)?;
        let (rows, cols) = (t.v0.rows(), t.v0.cols());
        if ckpt.v0.rows() != rows || ckpt.v0.cols() != cols {
            return Err(Error::Shape(format!(
                "checkpoint holds {}x{} embeddings, model needs {rows}x{cols}",
                ckpt.v0.rows(),
                ckpt.v0.cols()
            )));
        }
        t.restore(&ckpt);
        t.last_good = ckpt;
        Ok(t)
    }

    fn restore(&mut self, ckpt: &Checkpoint) {
        self.epoch = ckpt.epoch;
        self.step = ckpt.step;
        self.v0 = ckpt.v0.clone();
        self.adam.t = ckpt.adam_t;
        self.adam.m = ckpt.adam_m.clone();
        self.adam.v = ckpt.adam_v.clone();
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            epoch: self.epoch,
            step: self.step,
            v0: self.v0.clone(),
            adam_t: self.adam.t,
            adam_m: self.adam.m.clone(),
            adam_v: self.adam.v.clone(),
        }
    }

    /// State at the start of the last epoch that finished cleanly.
    pub fn last_good(&self) -> &Checkpoint {
        &self.last_good
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn graph(&self) -> &BipartiteGraph {
        &self.graph
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn embeddings(&self) -> &Matrix<f32> {
        &self.v0
    }

    pub fn states(&self) -> Result<EmbeddingState<f32>> {
        forward(&self.op, &self.v0, self.cfg.model.layers)
    }

    pub fn table(&self) -> Result<HashTable> {
        assemble(&self.states()?, self.graph.n1(), self.cfg.model.rescale)
    }

    /// The triples of epoch `epoch` (0-based): shuffled positives, each with
    /// `neg_samples` uniform unobserved partners.
    pub fn epoch_triples(&self, epoch: usize) -> Result<Vec<Triple>> {
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(self.cfg.seed, epoch as u64, usize::MAX, 2));
        let n2 = self.graph.n2();
        let mut out = Vec::with_capacity(self.graph.num_edges() * self.cfg.neg_samples);
        for &(u, v) in self.graph.edges() {
            if self.graph.degree(u) >= n2 {
                continue;
            }
            for _ in 0..self.cfg.neg_samples {
                let neg = loop {
                    let c = rng.random_range(0..n2);
                    if !self.graph.has_edge(u, c) {
                        break c;
                    }
                };
                out.push(Triple { user: u, pos: v, neg });
            }
        }
        if out.is_empty() {
            return Err(Error::Degenerate("every V1 node is linked to all of V2; no negatives exist".into()));
        }
        out.shuffle(&mut rng);
        Ok(out)
    }

    /// One pass over the training edges.
    pub fn run_epoch(&mut self) -> Result<EpochLog> {
        self.last_good = self.checkpoint();
        match self.epoch_inner() {
            Ok(log) => Ok(log),
            Err(e) => {
                let failed = self.epoch + 1;
                let ckpt = self.last_good.clone();
                self.restore(&ckpt);
                match e {
                    Error::NonFinite(msg) => Err(Error::Diverged { epoch: failed, msg }),
                    other => Err(other),
                }
            }
        }
    }

    fn epoch_inner(&mut self) -> Result<EpochLog> {
        let triples = self.epoch_triples(self.epoch)?;
        let mut total = LossBreakdown::default();
        let mut batches = 0;
        let est = self.cfg.estimator.clone();
        let local = move |phi: f64| est.local_grad(phi);
        for chunk in triples.chunks(self.cfg.batch_size) {
            let batch = TrainBatch {
                n1: self.graph.n1(),
                triples: chunk.to_vec(),
            };
            let states = forward(&self.op, &self.v0, self.cfg.model.layers)?;
            let table = assemble(&states, self.graph.n1(), self.cfg.model.rescale)?;
            let noise = if self.cfg.loss.contrastive() {
                Some(StepNoise::draw(&table, &batch, &self.cfg.augment, self.step)?)
            } else {
                None
            };
            let (loss, grad) = batch_gradient(
                &self.op,
                &states,
                &table,
                &batch,
                noise.as_ref(),
                &self.cfg.loss,
                self.cfg.model.rescale,
                &local,
            )?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("loss at step {}", self.step)));
            }
            if !grad.is_finite() {
                return Err(Error::NonFinite(format!("gradient at step {}", self.step)));
            }
            self.adam.step(self.v0.as_mut_slice(), grad.as_slice());
            if !self.v0.is_finite() {
                return Err(Error::NonFinite(format!("embeddings after step {}", self.step)));
            }
            total.accumulate(&loss);
            batches += 1;
            self.step += 1;
        }
        self.epoch += 1;
        let log = EpochLog {
            epoch: self.epoch,
            batches,
            loss: total,
        };
        log::info!(
            "epoch {} bpr={:.4} cl1={:.4} cl2={:.4} reg={:.4} total={:.4}",
            log.epoch,
            total.l_bpr,
            total.l_cl1,
            total.l_cl2,
            total.l_reg,
            total.l_total
        );
        Ok(log)
    }

    /// Runs until `cfg.epochs` epochs have completed, calling `on_epoch` after each.
    pub fn train(&mut self, mut on_epoch: impl FnMut(&Trainer, &EpochLog) -> Result<()>) -> Result<Vec<EpochLog>> {
        let mut logs = Vec::new();
        while self.epoch < self.cfg.epochs {
            let log = self.run_epoch()?;
            on_epoch(self, &log)?;
            logs.push(log);
        }
        Ok(logs)
    }
}

/// Trains from scratch and returns the final table and epoch logs.
pub fn train(graph: BipartiteGraph, cfg: TrainConfig) -> Result<(HashTable, Vec<EpochLog>)> {
    let mut t = Trainer::new(graph, cfg)?;
    let logs = t.train(|_, _| Ok(()))?;
    Ok((t.table()?, logs))
}
