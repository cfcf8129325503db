//! Late-fusion evaluation engine for ECG foundation-model embeddings.
//!
//! Per-model embedding matrices are min-max normalized, concatenated and
//! classified with a from-scratch gradient-boosted tree ensemble, then
//! evaluated over repeated stratified train/test reshuffles with AUROC and
//! average precision. Exact t-SNE projections and a class-conditional
//! Gaussian generator with closed-form Bayes AUROC round out the toolkit.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases at
//! the crate root fix it to `f64`, which is what the CLI uses.

pub mod cli;
pub mod embedding_store;
pub mod error;
pub mod fusion;
pub mod gbdt;
pub mod matrix;
pub mod metrics;
pub mod resampling;
pub mod rng;
pub mod scalar;
pub mod synthgen;
pub mod tsne;

pub use embedding_store::{align, read_csv, read_ebf, write_ebf, EmbeddingSet};
pub use error::{Error, Result};
pub use gbdt::{GbdtConfig, TreeNode};
pub use matrix::Matrix;
pub use metrics::{EvalResult, SummaryStats};
pub use scalar::Scalar;

/// Boosted model over `f64`.
pub type GbdtModel = gbdt::GbdtModel<f64>;
/// Min-max scaler over `f64`.
pub type MinMaxScaler = fusion::MinMaxScaler<f64>;
/// Feature matrix over `f64`.
pub type MatrixF64 = Matrix<f64>;
