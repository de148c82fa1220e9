//! Run configuration: a flat `key = value` file plus overrides, validated in
//! one place, and the `run.json` manifest written next to every run's outputs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::eval::{parse_planted, split};
use crate::graph::{load_edge_list, BipartiteGraph};
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DataConfig {
    /// Full edge list, split into train and test.
    pub edges: Option<PathBuf>,
    /// Pre-split training edges.
    pub train: Option<PathBuf>,
    /// Pre-split test edges.
    pub test: Option<PathBuf>,
    /// `planted:B:N:P_IN:P_OUT[:SEED]`.
    pub synthetic: Option<String>,
    pub split_ratio: f64,
    pub split_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputConfig {
    pub dir: PathBuf,
    pub table: String,
    pub checkpoint: String,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("run"),
            table: "table.ght".into(),
            checkpoint: "checkpoint.bin".into(),
        }
    }
}

impl OutputConfig {
    pub fn table_path(&self) -> PathBuf {
        self.dir.join(&self.table)
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.dir.join(&self.checkpoint)
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.dir.join("run.json")
    }

    pub fn log_path(&self) -> PathBuf {
        self.dir.join("train_log.jsonl")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub topn: Vec<usize>,
    /// Evaluate every this many epochs; 0 evaluates only at the end.
    pub every: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            topn: vec![20, 50, 100],
            every: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub data: DataConfig,
    pub output: OutputConfig,
    pub eval: EvalConfig,
    /// Write a checkpoint every this many epochs (0 disables).
    pub checkpoint_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            data: DataConfig {
                split_ratio: 0.2,
                ..Default::default()
            },
            output: OutputConfig::default(),
            eval: EvalConfig::default(),
            checkpoint_every: 1,
        }
    }
}

/// Every key [`RunConfig::set`] accepts.
pub const KEYS: &[&str] = &[
    "seed",
    "model.d",
    "model.layers",
    "model.init_scale",
    "model.seed",
    "model.rescale",
    "dispersion.enabled",
    "dispersion.epsilon",
    "dispersion.k",
    "dispersion.seed",
    "cl.tau",
    "cl.seed",
    "cl.sigma",
    "cl.alpha_noise",
    "cl.grad_through_alpha",
    "cl.binary_code_grad",
    "loss.lambda1",
    "loss.lambda2",
    "loss.cl1",
    "loss.cl2",
    "estimator.kind",
    "estimator.n",
    "estimator.h",
    "estimator.tanh_beta",
    "optim.lr",
    "optim.adam_beta1",
    "optim.adam_beta2",
    "optim.adam_eps",
    "train.epochs",
    "train.batch_size",
    "train.seed",
    "train.neg_samples",
    "train.checkpoint_every",
    "data.edges",
    "data.train",
    "data.test",
    "data.synthetic",
    "data.split_ratio",
    "data.split_seed",
    "output.dir",
    "output.table",
    "output.checkpoint",
    "eval.topn",
    "eval.every",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value.parse::<T>().map_err(|e| Error::Config {
        key: key.into(),
        msg: format!("{value:?}: {e}"),
    })
}

/// Reads `key = value` lines; `#` starts a comment. Returns pairs in file order.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            line: idx + 1,
            msg: format!("expected key = value, got {line:?}"),
        })?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Splits a `key=value` override.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::InvalidArgument(format!("override {s:?} is not key=value")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

pub fn parse_topn(value: &str) -> Result<Vec<usize>> {
    let list = value
        .split(',')
        .map(|s| parse::<usize>("eval.topn", s.trim()))
        .collect::<Result<Vec<_>>>()?;
    if list.is_empty() || list.contains(&0) {
        return Err(Error::Config {
            key: "eval.topn".into(),
            msg: "needs positive cutoffs".into(),
        });
    }
    Ok(list)
}

impl RunConfig {
    /// Defaults, then `pairs`. A `seed` key is applied before all others so
    /// that explicit per-module seeds still win.
    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply(pairs)?;
        Ok(cfg)
    }

    pub fn apply(&mut self, pairs: &[(String, String)]) -> Result<()> {
        for (k, v) in pairs.iter().filter(|(k, _)| k == "seed") {
            self.set(k, v)?;
        }
        for (k, v) in pairs.iter().filter(|(k, _)| k != "seed") {
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_pairs(&parse_pairs(&text)?)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        match key {
            "seed" => t.reseed(parse(key, value)?),
            "model.d" => t.model.dim = parse(key, value)?,
            "model.layers" => t.model.layers = parse(key, value)?,
            "model.init_scale" => t.model.init_scale = parse(key, value)?,
            "model.seed" => t.model.seed = parse(key, value)?,
            "model.rescale" => t.model.rescale = parse(key, value)?,
            "dispersion.enabled" => t.dispersion.enabled = parse(key, value)?,
            "dispersion.epsilon" => t.dispersion.epsilon = parse(key, value)?,
            "dispersion.k" => t.dispersion.k = parse(key, value)?,
            "dispersion.seed" => t.dispersion.seed = parse(key, value)?,
            "cl.tau" => t.augment.tau = parse(key, value)?,
            "cl.seed" => t.augment.seed = parse(key, value)?,
            "cl.sigma" => t.loss.sigma = parse(key, value)?,
            "cl.alpha_noise" => t.augment.alpha_noise = value.parse()?,
            "cl.grad_through_alpha" => t.loss.grad_through_alpha = parse(key, value)?,
            "cl.binary_code_grad" => t.loss.binary_code_grad = parse(key, value)?,
            "loss.lambda1" => t.loss.lambda1 = parse(key, value)?,
            "loss.lambda2" => t.loss.lambda2 = parse(key, value)?,
            "loss.cl1" => t.loss.cl1 = parse(key, value)?,
            "loss.cl2" => t.loss.cl2 = parse(key, value)?,
            "estimator.kind" => t.estimator.kind = value.parse()?,
            "estimator.n" => t.estimator.n = parse(key, value)?,
            "estimator.h" => t.estimator.h = parse(key, value)?,
            "estimator.tanh_beta" => t.estimator.tanh_beta = parse(key, value)?,
            "optim.lr" => t.optim.lr = parse(key, value)?,
            "optim.adam_beta1" => t.optim.beta1 = parse(key, value)?,
            "optim.adam_beta2" => t.optim.beta2 = parse(key, value)?,
            "optim.adam_eps" => t.optim.eps = parse(key, value)?,
            "train.epochs" => t.epochs = parse(key, value)?,
            "train.batch_size" => t.batch_size = parse(key, value)?,
            "train.seed" => t.seed = parse(key, value)?,
            "train.neg_samples" => t.neg_samples = parse(key, value)?,
            "train.checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            "data.edges" => self.data.edges = Some(value.into()),
            "data.train" => self.data.train = Some(value.into()),
            "data.test" => self.data.test = Some(value.into()),
            "data.synthetic" => self.data.synthetic = Some(value.into()),
            "data.split_ratio" => self.data.split_ratio = parse(key, value)?,
            "data.split_seed" => self.data.split_seed = parse(key, value)?,
            "output.dir" => self.output.dir = value.into(),
            "output.table" => self.output.table = value.into(),
            "output.checkpoint" => self.output.checkpoint = value.into(),
            "eval.topn" => self.eval.topn = parse_topn(value)?,
            "eval.every" => self.eval.every = parse(key, value)?,
            other => {
                return Err(Error::Config {
                    key: other.into(),
                    msg: "unknown key".into(),
                })
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        let sources = [
            self.data.edges.is_some(),
            self.data.train.is_some(),
            self.data.synthetic.is_some(),
        ]
        .iter()
        .filter(|&&b| b)
        .count();
        if sources != 1 {
            return Err(Error::Config {
                key: "data".into(),
                msg: "set exactly one of data.edges, data.train, data.synthetic".into(),
            });
        }
        if self.data.test.is_some() && self.data.train.is_none() {
            return Err(Error::Config {
                key: "data.test".into(),
                msg: "only valid together with data.train".into(),
            });
        }
        if !(self.data.split_ratio > 0.0 && self.data.split_ratio < 1.0) {
            return Err(Error::Config {
                key: "data.split_ratio".into(),
                msg: format!("must lie in (0, 1), got {}", self.data.split_ratio),
            });
        }
        if self.eval.topn.is_empty() || self.eval.topn.contains(&0) {
            return Err(Error::Config {
                key: "eval.topn".into(),
                msg: "needs positive cutoffs".into(),
            });
        }
        Ok(())
    }

    /// Loads or generates the training graph and held-out edges.
    pub fn load_data(&self) -> Result<Dataset> {
        self.validate()?;
        let d = &self.data;
        if let Some(path) = &d.train {
            let train = load_edge_list(path)?.graph;
            let test = match &d.test {
                Some(p) => load_test_edges(p, &train)?,
                None => Vec::new(),
            };
            return Ok(Dataset { train, test });
        }
        let full = match (&d.edges, &d.synthetic) {
            (Some(path), _) => load_edge_list(path)?.graph,
            (None, Some(desc)) => parse_planted(desc, self.train.seed)?,
            (None, None) => unreachable!("validated above"),
        };
        let (train, test) = split(&full, d.split_ratio, d.split_seed)?;
        Ok(Dataset { train, test })
    }

    /// Input files named by the config.
    pub fn input_paths(&self) -> Vec<PathBuf> {
        [&self.data.edges, &self.data.train, &self.data.test]
            .into_iter()
            .flatten()
            .cloned()
            .collect()
    }
}

/// Reads held-out edges and checks them against the training graph's bounds.
pub fn load_test_edges(path: impl AsRef<Path>, train: &BipartiteGraph) -> Result<Vec<(usize, usize)>> {
    let g = load_edge_list(path)?.graph;
    for &(u, v) in g.edges() {
        if u >= train.n1() || v >= train.n2() {
            return Err(Error::InvalidGraph(format!(
                "test edge ({u}, {v}) outside the training graph (n1={}, n2={})",
                train.n1(),
                train.n2()
            )));
        }
    }
    Ok(g.edges().to_vec())
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: BipartiteGraph,
    pub test: Vec<(usize, usize)>,
}

/// SHA-256 over `blob <len>\0` followed by the content, as git hashes objects.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputDigest {
    pub path: PathBuf,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub command: String,
    pub config: RunConfig,
    pub inputs: Vec<InputDigest>,
}

impl Manifest {
    pub fn new(command: &str, config: &RunConfig) -> Result<Self> {
        let inputs = config
            .input_paths()
            .into_iter()
            .map(|path| {
                let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
                Ok(InputDigest {
                    sha256: content_hash(&bytes),
                    bytes: bytes.len() as u64,
                    path,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            config: config.clone(),
            inputs,
        })
    }

    /// Refuses to overwrite an existing manifest.
    pub fn write_new(&self, path: impl AsRef<Path>) -> Result<()> {
        use std::io::Write as _;
        let path = path.as_ref();
        let mut f = std::fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
    }
}
