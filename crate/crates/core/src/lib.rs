//! Image collection modeling and recommendation.
//!
//! Collections of images are summarized by joint sparse (or group-sparse)
//! reconstruction codes over a block-diagonal dictionary, compared with a
//! learned Mahalanobis metric, and ranked for recommendation. The crate is
//! organized along the pipeline:
//!
//! - [`features`]: per-image feature units and the group layout they define.
//! - [`dictionary`]: per-unit dictionary learning and block-diagonal assembly.
//! - [`coder`]: collection descriptors with Huber or least-squares loss.
//! - [`metric`]: Mahalanobis metric learning from similar/dissimilar pairs.
//! - [`recommend`]: pair construction, ranking and MAP@K evaluation.
//! - [`datagen`]: seeded synthetic datasets and the query-mining simulation.
//! - [`pipeline`]: file formats and the stages behind the CLI.

pub mod coder;
pub mod datagen;
pub mod dictionary;
mod error;
pub mod features;
pub mod io;
pub mod metric;
pub mod pipeline;
pub mod recommend;

pub use error::{Error, Result};
