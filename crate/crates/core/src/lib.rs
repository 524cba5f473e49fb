//! Cross-modality (RGB / infrared) metric learning on embedding vectors.
//!
//! The pieces, in pipeline order:
//!
//! - [`data`], [`io`]: records, datasets and the EMB1 / CSV file formats.
//! - [`distance`]: pairwise Euclidean distances and their gradients.
//! - [`sampler`]: cm-batches of `P` identities x (`K` RGB + `K` IR).
//! - [`mining`]: hardest global and cross-modality positives/negatives.
//! - [`losses`]: triplet-family, pentaplet and identity losses with gradients.
//! - [`trainer`]: small embedding model, Adam, synthetic data, training loop.
//! - [`eval`]: gallery/probe protocol, CMC and mAP.
//! - [`pipeline`], [`config`]: end-to-end runs driven by a flat config file.
//!
//! Data-parallel loops go through [`Execution`]; with the default `parallel`
//! feature they run on rayon, otherwise sequentially, with identical results.

#![allow(clippy::needless_range_loop)]

pub mod config;
pub mod data;
pub mod distance;
pub mod error;
pub mod eval;
mod exec;
pub mod gradcheck;
pub mod io;
pub mod losses;
pub mod matrix;
pub mod mining;
pub mod pipeline;
pub mod sampler;
pub mod seed;
pub mod trainer;

pub use data::{EmbeddingDataset, EmbeddingRecord, Modality};
pub use distance::{distance_gradient, pairwise_distances, DistanceMatrix};
pub use error::{Error, Result};
pub use exec::Execution;
pub use matrix::Matrix;
pub use sampler::{CmBatch, CmBatchSpec};
