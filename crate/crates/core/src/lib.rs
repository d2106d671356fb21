//! Training and evaluation of k-sparse autoencoders on activation datasets:
//! TopK/ReLU/Multi-TopK autoencoders with dead-latent prevention, a metric
//! suite (downstream splicing, 1-d probes, n-gram explanations, ablation
//! sparsity, shrinkage, progressive recovery), and scaling-law fitting with
//! an irreducible loss term.

pub mod autoencoder;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod optimizer;
pub mod plot;
pub mod scaling;
pub mod subject;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
