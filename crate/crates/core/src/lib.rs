//! Learning compact binary codes for the two node sets of a bipartite graph
//! and retrieving with Hamming distance.
//!
//! The pipeline: load a [`graph::BipartiteGraph`], propagate layer-0
//! embeddings through the normalized adjacency ([`model`]), hash every layer
//! into a [`table::HashTable`], train with BPR plus two contrastive terms
//! ([`objective`], [`augment`]) through a smooth sign surrogate
//! ([`estimator`]), and serve Top-N queries from a [`index::HammingIndex`].

pub mod augment;
pub mod config;
pub mod dispersion;
pub mod error;
pub mod estimator;
pub mod eval;
pub mod graph;
pub mod index;
pub mod linalg;
pub mod model;
pub mod objective;
pub mod optim;
pub mod table;
pub mod train;

pub use error::{Error, Result};
