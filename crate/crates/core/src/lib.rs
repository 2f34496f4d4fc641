//! Delay-aware spatial-temporal attention for traffic flow forecasting.
//!
//! The crate covers the full pipeline: graph preprocessing (hop masks,
//! Laplacian embeddings), pattern mining (DTW semantic neighbours, k-Shape
//! traffic patterns), a small reverse-mode differentiation substrate, the
//! encoder model itself, data loading, training and masked evaluation.
//!
//! Data-parallel loops (pairwise DTW, k-Shape assignment, per-sample
//! forward/backward inside a batch) go through [`par`], which uses rayon
//! when the `parallel` feature is enabled and falls back to plain iterators
//! otherwise. Reductions always happen in a fixed order, so results do not
//! depend on the execution mode.

pub mod autodiff;
pub mod data;
pub mod embedding;
pub mod encoder;
pub mod error;
pub mod graph;
pub mod io;
pub mod matrix;
pub mod metrics;
pub mod model;
pub mod par;
pub mod pattern;
pub mod pipeline;
pub mod train;

pub use error::{Error, Result};
