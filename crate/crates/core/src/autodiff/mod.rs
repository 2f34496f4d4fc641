//! Dense tensors with tape-based reverse-mode differentiation.
//!
//! A [`Tape`] records one forward computation against a read-only
//! [`ParamStore`]; [`Tape::backward`] returns per-parameter [`Gradients`]
//! that callers accumulate (in a fixed order) before an [`AdamW`] step.
//! Tapes are cheap and single-threaded, so batches are differentiated by
//! running one tape per sample and summing the results.

mod checkpoint;
mod optim;
mod params;
mod tape;
mod tensor;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use optim::AdamW;
pub use params::{Gradients, ParamId, ParamStore, Parameter};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

/// Epsilon used by layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;
