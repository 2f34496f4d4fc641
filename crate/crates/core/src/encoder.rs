//! One spatial-temporal encoder layer.
//!
//! Three head families share a single multi-head block: geographic spatial
//! heads (hop-masked, keys shifted by the delay-aware pattern summary),
//! semantic spatial heads (DTW-masked) and temporal heads (per node over
//! the input steps). Their outputs are concatenated, projected, and passed
//! through post-norm residual and feed-forward sublayers.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::embedding::fan_in_uniform;
use crate::matrix::BinaryMatrix;
use crate::pattern::z_normalize;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub geo: usize,
    pub sem: usize,
    pub temporal: usize,
    /// Model dimension `d`.
    pub dim: usize,
}

impl HeadConfig {
    pub fn new(geo: usize, sem: usize, temporal: usize, dim: usize) -> Result<Self> {
        let cfg = Self {
            geo,
            sem,
            temporal,
            dim,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let total = self.total();
        if total == 0 {
            return Err(Error::Config("at least one attention head is required".into()));
        }
        if self.dim == 0 || self.dim % total != 0 {
            return Err(Error::Config(format!(
                "model dim {} is not divisible by {total} heads",
                self.dim
            )));
        }
        Ok(())
    }

    pub fn total(&self) -> usize {
        self.geo + self.sem + self.temporal
    }

    /// Per-head dimension `d' = d / (h_geo + h_sem + h_t)`.
    pub fn head_dim(&self) -> usize {
        self.dim / self.total()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Geo,
    Sem,
    Temporal,
}

#[derive(Debug, Clone)]
pub struct HeadWeights {
    pub query: ParamId,
    pub key: ParamId,
    pub value: ParamId,
}

/// Pattern-memory maps of the delay-aware key transformation, each `S x d'`.
#[derive(Debug, Clone)]
pub struct DelayMemory {
    pub history: ParamId,
    pub memory: ParamId,
    pub content: ParamId,
}

#[derive(Debug, Clone)]
pub struct EncoderLayerParams {
    pub geo: Vec<HeadWeights>,
    pub sem: Vec<HeadWeights>,
    pub temporal: Vec<HeadWeights>,
    pub output: ParamId,
    pub delay: DelayMemory,
    pub norm1: (ParamId, ParamId),
    pub ffn_in: (ParamId, ParamId),
    pub ffn_out: (ParamId, ParamId),
    pub norm2: (ParamId, ParamId),
}

impl EncoderLayerParams {
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        heads: &HeadConfig,
        pattern_window: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let (d, dh) = (heads.dim, heads.head_dim());
        let head = |store: &mut ParamStore, kind: &str, i: usize, rng: &mut _| -> Result<HeadWeights> {
            let name = |w: &str| format!("{prefix}.{kind}{i}.{w}");
            Ok(HeadWeights {
                query: store.add(name("query"), fan_in_uniform(&[d, dh], d, rng))?,
                key: store.add(name("key"), fan_in_uniform(&[d, dh], d, rng))?,
                value: store.add(name("value"), fan_in_uniform(&[d, dh], d, rng))?,
            })
        };
        let geo = (0..heads.geo).map(|i| head(store, "geo", i, rng)).collect::<Result<_>>()?;
        let sem = (0..heads.sem).map(|i| head(store, "sem", i, rng)).collect::<Result<_>>()?;
        let temporal = (0..heads.temporal)
            .map(|i| head(store, "temporal", i, rng))
            .collect::<Result<_>>()?;
        let output = store.add(format!("{prefix}.attn_out"), fan_in_uniform(&[d, d], d, rng))?;
        let s = pattern_window;
        let delay = DelayMemory {
            history: store.add(format!("{prefix}.delay.history"), fan_in_uniform(&[s, dh], s, rng))?,
            memory: store.add(format!("{prefix}.delay.memory"), fan_in_uniform(&[s, dh], s, rng))?,
            content: store.add(format!("{prefix}.delay.content"), fan_in_uniform(&[s, dh], s, rng))?,
        };
        let norm = |store: &mut ParamStore, which: &str| -> Result<(ParamId, ParamId)> {
            Ok((
                store.add(format!("{prefix}.{which}.gain"), Tensor::filled(&[d], 1.0))?,
                store.add(format!("{prefix}.{which}.bias"), Tensor::zeros(&[d]))?,
            ))
        };
        let norm1 = norm(store, "norm1")?;
        let hidden = 4 * d;
        let ffn_in = (
            store.add(format!("{prefix}.ffn.in.weight"), fan_in_uniform(&[d, hidden], d, rng))?,
            store.add(format!("{prefix}.ffn.in.bias"), fan_in_uniform(&[hidden], d, rng))?,
        );
        let ffn_out = (
            store.add(format!("{prefix}.ffn.out.weight"), fan_in_uniform(&[hidden, d], hidden, rng))?,
            store.add(format!("{prefix}.ffn.out.bias"), fan_in_uniform(&[d], hidden, rng))?,
        );
        let norm2 = norm(store, "norm2")?;
        Ok(Self {
            geo,
            sem,
            temporal,
            output,
            delay,
            norm1,
            ffn_in,
            ffn_out,
            norm2,
        })
    }
}

/// Per-forward context shared by all layers.
pub struct LayerContext<'a> {
    pub steps: usize,
    pub nodes: usize,
    pub heads: HeadConfig,
    pub geo_mask: &'a BinaryMatrix,
    pub sem_mask: &'a BinaryMatrix,
    /// `(N_p, S)` pattern centroids.
    pub patterns: &'a Tensor,
    /// `(T, N, C, S)` flow histories ending at each input step.
    pub histories: &'a Tensor,
    pub use_delay: bool,
    pub dropout: f64,
}

/// Captured attention probabilities of one head.
#[derive(Debug, Clone, Copy)]
pub struct AttentionRecord {
    pub layer: usize,
    pub kind: HeadKind,
    pub head: usize,
    /// `(T, N, N)` for spatial heads, `(N, T, T)` for temporal heads.
    pub probs: Var,
}

/// One exported attention matrix (a single time slice or node).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionMap {
    pub layer: usize,
    pub head_kind: HeadKind,
    pub head_index: usize,
    pub slice_or_node: usize,
    pub matrix: Vec<Vec<f64>>,
}

pub fn attention_maps(tape: &Tape<'_>, records: &[AttentionRecord]) -> Vec<AttentionMap> {
    let mut maps = Vec::new();
    for r in records {
        let t = tape.value(r.probs);
        let (batch, rows, cols) = (t.shape()[0], t.shape()[1], t.shape()[2]);
        for b in 0..batch {
            let matrix = (0..rows)
                .map(|i| t.data()[(b * rows + i) * cols..(b * rows + i + 1) * cols].to_vec())
                .collect();
            maps.push(AttentionMap {
                layer: r.layer,
                head_kind: r.kind,
                head_index: r.head,
                slice_or_node: b,
                matrix,
            });
        }
    }
    maps
}

/// `Q K^T / sqrt(d')` for batched `(B, M, d')` queries and keys.
pub fn attention_scores(tape: &mut Tape<'_>, q: Var, k: Var) -> Result<Var> {
    let dh = *tape.shape(q).last().unwrap_or(&1);
    let kt = tape.transpose_last2(k)?;
    let s = tape.batch_matmul(q, kt)?;
    Ok(tape.scale(s, 1.0 / (dh as f64).sqrt()))
}

/// Spatial scores of a single `(N, d)` slice.
pub fn spatial_scores(tape: &mut Tape<'_>, slice: Var, head: &HeadWeights) -> Result<Var> {
    let n = tape.shape(slice)[0];
    let (wq, wk) = (tape.param(head.query), tape.param(head.key));
    let q = tape.matmul(slice, wq)?;
    let k = tape.matmul(slice, wk)?;
    let dh = tape.shape(q)[1];
    let q = tape.reshape(q, &[1, n, dh])?;
    let k = tape.reshape(k, &[1, n, dh])?;
    let s = attention_scores(tape, q, k)?;
    tape.reshape(s, &[n, n])
}

/// Pattern-memory summary `R` for every `(t, n)`, as a `(T*N, d')` matrix.
///
/// Each channel's `S`-step history is z-normalized, embedded with the
/// history map, compared against the memory-embedded patterns, and the
/// softmax weights mix the content-embedded patterns. Channels are summed.
pub fn delay_transform(
    tape: &mut Tape<'_>,
    histories: &Tensor,
    patterns: &Tensor,
    memory: &DelayMemory,
) -> Result<Var> {
    let (steps, nodes, channels, window) = match histories.shape() {
        &[t, n, c, s] => (t, n, c, s),
        s => return Err(Error::shape("delay_transform", format!("histories {s:?}"))),
    };
    if patterns.rank() != 2 || patterns.shape()[1] != window {
        return Err(Error::shape(
            "delay_transform",
            format!("history window {window} vs patterns {:?}", patterns.shape()),
        ));
    }
    let rows = steps * nodes;
    let p = tape.constant(patterns.clone());
    let (wu, wm, wc) = (
        tape.param(memory.history),
        tape.param(memory.memory),
        tape.param(memory.content),
    );
    let mem = tape.matmul(p, wm)?;
    let mem_t = tape.transpose_last2(mem)?;
    let content = tape.matmul(p, wc)?;

    let mut total: Option<Var> = None;
    for c in 0..channels {
        let mut h = Vec::with_capacity(rows * window);
        for r in 0..rows {
            let base = (r * channels + c) * window;
            h.extend(z_normalize(&histories.data()[base..base + window]));
        }
        let h = tape.constant(Tensor::new(vec![rows, window], h)?);
        let u = tape.matmul(h, wu)?;
        let logits = tape.matmul(u, mem_t)?;
        let weights = tape.softmax_lastdim(logits, None)?;
        let r = tape.matmul(weights, content)?;
        total = Some(match total {
            Some(t) => tape.add(t, r)?,
            None => r,
        });
    }
    total.ok_or_else(|| Error::shape("delay_transform", "no channels"))
}

fn time_to_node_major(steps: usize, nodes: usize) -> Arc<Vec<usize>> {
    Arc::new((0..steps * nodes).map(|r| (r % steps) * nodes + r / steps).collect())
}

fn node_to_time_major(steps: usize, nodes: usize) -> Arc<Vec<usize>> {
    Arc::new((0..steps * nodes).map(|r| (r % nodes) * steps + r / nodes).collect())
}

fn project_heads(
    tape: &mut Tape<'_>,
    x: Var,
    head: &HeadWeights,
    batch: usize,
    len: usize,
) -> Result<(Var, Var, Var)> {
    let (wq, wk, wv) = (tape.param(head.query), tape.param(head.key), tape.param(head.value));
    let dh = tape.shape(wq)[1];
    let mut proj = |w| -> Result<Var> {
        let y = tape.matmul(x, w)?;
        tape.reshape(y, &[batch, len, dh])
    };
    Ok((proj(wq)?, proj(wk)?, proj(wv)?))
}

/// Heterogeneous multi-head attention over a `(T*N, d)` input, returning
/// `(T*N, d)` after the output projection.
pub fn fused_attention(
    tape: &mut Tape<'_>,
    x: Var,
    params: &EncoderLayerParams,
    ctx: &LayerContext<'_>,
    layer: usize,
    mut capture: Option<&mut Vec<AttentionRecord>>,
) -> Result<Var> {
    let (t_len, n_len) = (ctx.steps, ctx.nodes);
    let rows = t_len * n_len;
    if tape.shape(x) != [rows, ctx.heads.dim] {
        return Err(Error::shape(
            "fused_attention",
            format!("input {:?}, expected [{rows}, {}]", tape.shape(x), ctx.heads.dim),
        ));
    }
    for (name, m) in [("geo", ctx.geo_mask), ("sem", ctx.sem_mask)] {
        if m.rows() != n_len || m.cols() != n_len {
            return Err(Error::shape(
                "fused_attention",
                format!("{name} mask {}x{} for {n_len} nodes", m.rows(), m.cols()),
            ));
        }
    }
    let dh = ctx.heads.head_dim();
    let mut outputs = Vec::with_capacity(ctx.heads.total());

    let delay = if ctx.use_delay && !params.geo.is_empty() {
        let r = delay_transform(tape, ctx.histories, ctx.patterns, &params.delay)?;
        Some(tape.reshape(r, &[t_len, n_len, dh])?)
    } else {
        None
    };

    let spatial = params
        .geo
        .iter()
        .map(|h| (HeadKind::Geo, h, ctx.geo_mask))
        .chain(params.sem.iter().map(|h| (HeadKind::Sem, h, ctx.sem_mask)));
    let mut counters = [0usize; 2];
    for (kind, head, mask) in spatial {
        let (q, mut k, v) = project_heads(tape, x, head, t_len, n_len)?;
        if let (HeadKind::Geo, Some(r)) = (kind, delay) {
            k = tape.add(k, r)?;
        }
        let scores = attention_scores(tape, q, k)?;
        let probs = tape.softmax_lastdim(scores, Some(mask))?;
        let idx = &mut counters[(kind == HeadKind::Sem) as usize];
        if let Some(cap) = capture.as_deref_mut() {
            cap.push(AttentionRecord {
                layer,
                kind,
                head: *idx,
                probs,
            });
        }
        *idx += 1;
        let z = tape.batch_matmul(probs, v)?;
        outputs.push(tape.reshape(z, &[rows, dh])?);
    }

    if !params.temporal.is_empty() {
        let xn = tape.gather_rows(x, time_to_node_major(t_len, n_len))?;
        let back = node_to_time_major(t_len, n_len);
        for (i, head) in params.temporal.iter().enumerate() {
            let (q, k, v) = project_heads(tape, xn, head, n_len, t_len)?;
            let scores = attention_scores(tape, q, k)?;
            let probs = tape.softmax_lastdim(scores, None)?;
            if let Some(cap) = capture.as_deref_mut() {
                cap.push(AttentionRecord {
                    layer,
                    kind: HeadKind::Temporal,
                    head: i,
                    probs,
                });
            }
            let z = tape.batch_matmul(probs, v)?;
            let z = tape.reshape(z, &[rows, dh])?;
            outputs.push(tape.gather_rows(z, back.clone())?);
        }
    }

    let cat = tape.concat_lastdim(&outputs)?;
    let wo = tape.param(params.output);
    tape.matmul(cat, wo)
}

fn maybe_dropout(tape: &mut Tape<'_>, x: Var, rate: f64, rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
    match rng {
        Some(rng) if rate > 0.0 => {
            let keep: Vec<bool> = (0..tape.value(x).len()).map(|_| rng.random::<f64>() >= rate).collect();
            tape.dropout(x, &keep, rate)
        }
        _ => Ok(x),
    }
}

/// `y = LN(x + STAttn(x))`, `out = LN(y + FFN(y))` with a GELU feed-forward
/// network of width `4d`. Dropout applies only when an RNG is supplied.
pub fn encoder_layer(
    tape: &mut Tape<'_>,
    x: Var,
    params: &EncoderLayerParams,
    ctx: &LayerContext<'_>,
    layer: usize,
    capture: Option<&mut Vec<AttentionRecord>>,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<Var> {
    let attn = fused_attention(tape, x, params, ctx, layer, capture)?;
    let attn = maybe_dropout(tape, attn, ctx.dropout, rng.as_deref_mut())?;
    let res = tape.add(x, attn)?;
    let (g1, b1) = (tape.param(params.norm1.0), tape.param(params.norm1.1));
    let y = tape.layer_norm(res, g1, b1)?;

    let (w_in, b_in) = (tape.param(params.ffn_in.0), tape.param(params.ffn_in.1));
    let hidden = tape.linear(y, w_in, Some(b_in))?;
    let hidden = tape.gelu(hidden);
    let (w_out, b_out) = (tape.param(params.ffn_out.0), tape.param(params.ffn_out.1));
    let ffn = tape.linear(hidden, w_out, Some(b_out))?;
    let ffn = maybe_dropout(tape, ffn, ctx.dropout, rng)?;
    let res = tape.add(y, ffn)?;
    let (g2, b2) = (tape.param(params.norm2.0), tape.param(params.norm2.1));
    tape.layer_norm(res, g2, b2)
}
