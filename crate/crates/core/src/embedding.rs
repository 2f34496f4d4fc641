//! Input representation: projected flow plus Laplacian spatial embedding,
//! weekly and daily periodic embeddings and a sinusoidal position encoding.
//!
//! Embedded tensors are kept as `(T*N, d)` matrices with time-major rows
//! (`row = t * N + n`).

use std::sync::Arc;

use rand::Rng;

use crate::autodiff::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::data::TimeIndexMeta;
use crate::graph::LaplacianEmbeddingBasis;
use crate::{Error, Result};

pub const TABLE_INIT_BOUND: f64 = 0.04;

/// `PE[t, 2i] = sin(t / 10000^(2i/d))`, `PE[t, 2i+1] = cos(...)`, `t` from 0.
pub fn temporal_position_encoding(steps: usize, dim: usize) -> Result<Tensor> {
    if dim % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "position encoding needs an even dimension, got {dim}"
        )));
    }
    Ok(Tensor::from_fn(&[steps, dim], |idx| {
        let (t, j) = (idx / dim, idx % dim);
        let i2 = (j - j % 2) as f64;
        let angle = t as f64 / 10000f64.powf(i2 / dim as f64);
        if j % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    }))
}

/// Symmetric uniform init scaled by fan-in.
pub(crate) fn fan_in_uniform(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    Tensor::uniform(shape, 1.0 / (fan_in.max(1) as f64).sqrt(), rng)
}

#[derive(Debug, Clone)]
pub struct EmbeddingTables {
    pub data_weight: ParamId,
    pub data_bias: ParamId,
    pub laplacian_weight: ParamId,
    pub laplacian_bias: ParamId,
    pub week_table: ParamId,
    pub day_table: ParamId,
    pub dim: usize,
}

impl EmbeddingTables {
    pub fn register(
        store: &mut ParamStore,
        channels: usize,
        laplacian_dim: usize,
        dim: usize,
        slots_per_day: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            data_weight: store.add("embed.data.weight", fan_in_uniform(&[channels, dim], channels, rng))?,
            data_bias: store.add("embed.data.bias", fan_in_uniform(&[dim], channels, rng))?,
            laplacian_weight: store.add(
                "embed.laplacian.weight",
                fan_in_uniform(&[laplacian_dim, dim], laplacian_dim, rng),
            )?,
            laplacian_bias: store.add("embed.laplacian.bias", fan_in_uniform(&[dim], laplacian_dim, rng))?,
            week_table: store.add("embed.week", Tensor::uniform(&[7, dim], TABLE_INIT_BOUND, rng))?,
            day_table: store.add(
                "embed.day",
                Tensor::uniform(&[slots_per_day, dim], TABLE_INIT_BOUND, rng),
            )?,
            dim,
        })
    }
}

/// Sum of the five embedding terms for a `(T, N, C)` window; returns a
/// `(T*N, d)` matrix. `position` is the constant `(T, d)` encoding.
pub fn embed(
    tape: &mut Tape<'_>,
    window: &Tensor,
    meta: &TimeIndexMeta,
    basis: &LaplacianEmbeddingBasis,
    tables: &EmbeddingTables,
    position: &Tensor,
) -> Result<Var> {
    let (steps, nodes, channels) = match window.shape() {
        &[t, n, c] => (t, n, c),
        s => return Err(Error::shape("embed", format!("window must be (T,N,C), got {s:?}"))),
    };
    let dim = tables.dim;
    if meta.len() != steps {
        return Err(Error::shape("embed", format!("{} time slots for {steps} steps", meta.len())));
    }
    if basis.nodes() != nodes {
        return Err(Error::shape("embed", format!("basis has {} rows for {nodes} nodes", basis.nodes())));
    }
    if position.shape() != [steps, dim] {
        return Err(Error::shape("embed", format!("position encoding {:?}", position.shape())));
    }
    let store = tape.store();
    let day_rows = store.get(tables.day_table).value.shape()[0];
    if meta.slots.iter().any(|s| s.day_slot >= day_rows) {
        return Err(Error::shape("embed", format!("day slot beyond table size {day_rows}")));
    }

    let x = tape.constant(window.reshape(&[steps * nodes, channels])?);
    let (dw, db) = (tape.param(tables.data_weight), tape.param(tables.data_bias));
    let data = tape.linear(x, dw, Some(db))?;

    let b = tape.constant(Tensor::new(vec![nodes, basis.dim()], basis.vectors().to_vec())?);
    let (lw, lb) = (tape.param(tables.laplacian_weight), tape.param(tables.laplacian_bias));
    let spatial = tape.linear(b, lw, Some(lb))?;
    let node_of_row = Arc::new((0..steps * nodes).map(|r| r % nodes).collect::<Vec<_>>());
    let spatial = tape.gather_rows(spatial, node_of_row)?;

    let week_idx = Arc::new(meta.slots.iter().map(|s| s.week_index as usize - 1).collect::<Vec<_>>());
    let day_idx = Arc::new(meta.slots.iter().map(|s| s.day_slot).collect::<Vec<_>>());
    let week_table = tape.param(tables.week_table);
    let day_table = tape.param(tables.day_table);
    let week = tape.gather_rows(week_table, week_idx)?;
    let day = tape.gather_rows(day_table, day_idx)?;
    let pe = tape.constant(position.clone());
    let temporal = tape.add(week, day)?;
    let temporal = tape.add(temporal, pe)?;
    let step_of_row = Arc::new((0..steps * nodes).map(|r| r / nodes).collect::<Vec<_>>());
    let temporal = tape.gather_rows(temporal, step_of_row)?;

    let out = tape.add(data, spatial)?;
    let out = tape.add(out, temporal)?;
    debug_assert_eq!(tape.shape(out), &[steps * nodes, dim]);
    Ok(out)
}
