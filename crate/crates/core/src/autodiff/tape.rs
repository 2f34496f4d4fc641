use std::collections::HashMap;
use std::sync::Arc;

use super::params::Gradients;
use super::tensor::{matmul_at_into, matmul_bt_into, matmul_into};
use super::{ParamId, ParamStore, Tensor};
use crate::matrix::BinaryMatrix;
use crate::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    MulRow(Var, Var),
    AddCol(Var, Var),
    Concat(Vec<Var>),
    Transpose(Var),
    Reshape(Var),
    GatherRows(Var, Arc<Vec<usize>>),
    Softmax(Var),
    Normalize(Var, f64),
    Gelu(Var),
    Abs(Var),
    Huber(Var, f64),
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Records a forward computation for reverse-mode differentiation.
pub struct Tape<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

impl<'s> Tape<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant)
    }

    /// The current value of a parameter; repeated calls share one node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let value = self.store.get(id).value.clone();
        let v = self.push(value, Op::Param(id));
        self.param_vars.insert(id, v);
        v
    }

    pub fn param_by_name(&mut self, name: &str) -> Result<Var> {
        let id = self
            .store
            .id(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter `{name}`")))?;
        Ok(self.param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// `(B, m, k) x (B, k, n) -> (B, m, n)`.
    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (batch, m, k, n) = match (av.shape(), bv.shape()) {
            (&[b1, m, k], &[b2, k2, n]) if b1 == b2 && k == k2 => (b1, m, k, n),
            (sa, sb) => return Err(Error::shape("batch_matmul", format!("{sa:?} x {sb:?}"))),
        };
        let mut out = vec![0.0; batch * m * n];
        for i in 0..batch {
            matmul_into(
                &av.data()[i * m * k..(i + 1) * m * k],
                &bv.data()[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let t = Tensor::new(vec![batch, m, n], out)?;
        Ok(self.push(t, Op::BatchMatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.value(a), self.value(b))?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("sub", self.value(a), self.value(b))?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push(out, Op::Sub(a, b)))
    }

    /// Elementwise (Hadamard) product.
    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("hadamard", self.value(a), self.value(b))?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a).map(|x| x * factor);
        self.push(out, Op::Scale(a, factor))
    }

    fn row_vector_check(&self, op: &'static str, x: Var, b: Var) -> Result<usize> {
        let (xv, bv) = (self.value(x), self.value(b));
        if bv.rank() != 1 || xv.rank() == 0 || xv.last_dim() != bv.len() {
            return Err(Error::shape(op, format!("{:?} with {:?}", xv.shape(), bv.shape())));
        }
        Ok(bv.len())
    }

    /// Adds a vector along the last dimension.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = self.row_vector_check("add_row", x, bias)?;
        let b = self.value(bias).data().to_vec();
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().enumerate().for_each(|(i, v)| *v += b[i % n]);
        Ok(self.push(out, Op::AddRow(x, bias)))
    }

    /// Multiplies by a vector along the last dimension.
    pub fn mul_row(&mut self, x: Var, gain: Var) -> Result<Var> {
        let n = self.row_vector_check("mul_row", x, gain)?;
        let g = self.value(gain).data().to_vec();
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().enumerate().for_each(|(i, v)| *v *= g[i % n]);
        Ok(self.push(out, Op::MulRow(x, gain)))
    }

    /// Adds `bias[i]` to every entry of row `i` of a matrix.
    pub fn add_col(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let (rows, cols) = match xv.shape() {
            &[r, c] if bv.rank() == 1 && bv.len() == r => (r, c),
            s => return Err(Error::shape("add_col", format!("{s:?} with {:?}", bv.shape()))),
        };
        let b = bv.data().to_vec();
        let mut out = xv.clone();
        for r in 0..rows {
            out.data_mut()[r * cols..(r + 1) * cols].iter_mut().for_each(|v| *v += b[r]);
        }
        Ok(self.push(out, Op::AddCol(x, bias)))
    }

    /// Affine map `x W + b` over the last dimension of a matrix.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, weight)?;
        match bias {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    pub fn concat_lastdim(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::shape("concat_lastdim", "no inputs"))?;
        let lead = self.shape(first)[..self.shape(first).len().saturating_sub(1)].to_vec();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[..s.len() - 1] != lead[..] {
                return Err(Error::shape(
                    "concat_lastdim",
                    format!("{:?} vs leading dims {lead:?}", s),
                ));
            }
            widths.push(s[s.len() - 1]);
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::Concat(parts.to_vec())))
    }

    pub fn transpose_last2(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).transpose_last2()?;
        Ok(self.push(out, Op::Transpose(x)))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x)))
    }

    /// Row `i` of the output is row `indices[i]` of the matrix `x`.
    pub fn gather_rows(&mut self, x: Var, indices: Arc<Vec<usize>>) -> Result<Var> {
        let xv = self.value(x);
        let (rows, cols) = match xv.shape() {
            &[r, c] => (r, c),
            s => return Err(Error::shape("gather_rows", format!("expected a matrix, got {s:?}"))),
        };
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::shape("gather_rows", format!("row {bad} of {rows}")));
        }
        let mut out = Vec::with_capacity(indices.len() * cols);
        for &i in indices.iter() {
            out.extend_from_slice(&xv.data()[i * cols..(i + 1) * cols]);
        }
        let t = Tensor::new(vec![indices.len(), cols], out)?;
        Ok(self.push(t, Op::GatherRows(x, indices)))
    }

    /// Softmax over the last axis. With a mask, entries where the mask is 0
    /// get `-inf` before exponentiation (so exactly 0 after); the mask covers
    /// the last two axes and is broadcast over leading ones.
    pub fn softmax_lastdim(&mut self, x: Var, mask: Option<&BinaryMatrix>) -> Result<Var> {
        let xv = self.value(x);
        let cols = xv.last_dim();
        if let Some(m) = mask {
            let s = xv.shape();
            if s.len() < 2 || s[s.len() - 2] != m.rows() || s[s.len() - 1] != m.cols() {
                return Err(Error::shape(
                    "softmax_lastdim",
                    format!("mask {}x{} for scores {s:?}", m.rows(), m.cols()),
                ));
            }
        }
        let rows = xv.len() / cols.max(1);
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let src = &xv.data()[r * cols..(r + 1) * cols];
            let keep = |j: usize| mask.map_or(true, |m| m.get(r % m.rows(), j));
            let max = (0..cols)
                .filter(|&j| keep(j))
                .map(|j| src[j])
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::Numeric(format!("softmax row {r} is fully masked")));
            }
            let dst = &mut out[r * cols..(r + 1) * cols];
            let mut total = 0.0;
            for j in 0..cols {
                if keep(j) {
                    dst[j] = (src[j] - max).exp();
                    total += dst[j];
                }
            }
            dst.iter_mut().for_each(|v| *v /= total);
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(t, Op::Softmax(x)))
    }

    /// Zero-mean, unit-variance normalization over the last axis.
    pub fn normalize_lastdim(&mut self, x: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let cols = xv.last_dim().max(1);
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(cols) {
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + eps).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * inv);
        }
        self.push(out, Op::Normalize(x, eps))
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let n = self.normalize_lastdim(x, super::LAYER_NORM_EPS);
        let g = self.mul_row(n, gain)?;
        self.add_row(g, bias)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(gelu);
        self.push(out, Op::Gelu(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::abs);
        self.push(out, Op::Abs(x))
    }

    /// Elementwise Huber penalty with threshold `delta`.
    pub fn huber(&mut self, x: Var, delta: f64) -> Var {
        let out = self.value(x).map(|v| {
            if v.abs() <= delta {
                0.5 * v * v
            } else {
                delta * (v.abs() - 0.5 * delta)
            }
        });
        self.push(out, Op::Huber(x, delta))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum(x))
    }

    /// Inverted dropout with a caller-supplied keep mask (1 keep / 0 drop).
    pub fn dropout(&mut self, x: Var, keep: &[bool], rate: f64) -> Result<Var> {
        if keep.len() != self.value(x).len() {
            return Err(Error::shape("dropout", "keep mask length differs".to_string()));
        }
        let scale = 1.0 / (1.0 - rate);
        let mask = Tensor::new(
            self.shape(x).to_vec(),
            keep.iter().map(|&k| if k { scale } else { 0.0 }).collect(),
        )?;
        let m = self.constant(mask);
        self.hadamard(x, m)
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::filled(self.shape(loss), 1.0));
        let mut out = Gradients::empty(self.store.len());

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let mut acc = |v: Var, t: Tensor| match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => *slot = Some(t),
            };
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => {
                    let slot = &mut out.grads[id.0];
                    match slot {
                        Some(e) => e.add_assign(&g),
                        None => *slot = Some(g),
                    }
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                    let mut da = vec![0.0; m * k];
                    matmul_bt_into(g.data(), bv.data(), &mut da, m, n, k);
                    let mut db = vec![0.0; k * n];
                    matmul_at_into(av.data(), g.data(), &mut db, m, k, n);
                    acc(*a, Tensor::new(vec![m, k], da)?);
                    acc(*b, Tensor::new(vec![k, n], db)?);
                }
                Op::BatchMatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (batch, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
                    let n = bv.shape()[2];
                    let mut da = vec![0.0; batch * m * k];
                    let mut db = vec![0.0; batch * k * n];
                    for i in 0..batch {
                        let gs = &g.data()[i * m * n..(i + 1) * m * n];
                        matmul_bt_into(gs, &bv.data()[i * k * n..(i + 1) * k * n], &mut da[i * m * k..(i + 1) * m * k], m, n, k);
                        matmul_at_into(&av.data()[i * m * k..(i + 1) * m * k], gs, &mut db[i * k * n..(i + 1) * k * n], m, k, n);
                    }
                    acc(*a, Tensor::new(vec![batch, m, k], da)?);
                    acc(*b, Tensor::new(vec![batch, k, n], db)?);
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g);
                }
                Op::Sub(a, b) => {
                    acc(*b, g.map(|v| -v));
                    acc(*a, g);
                }
                Op::Mul(a, b) => {
                    let da = g.zip_map(self.value(*b), |x, y| x * y);
                    let db = g.zip_map(self.value(*a), |x, y| x * y);
                    acc(*a, da);
                    acc(*b, db);
                }
                Op::Scale(a, f) => acc(*a, g.map(|v| v * f)),
                Op::AddRow(x, b) => {
                    let n = self.value(*b).len();
                    let mut db = vec![0.0; n];
                    g.data().iter().enumerate().for_each(|(i, v)| db[i % n] += v);
                    acc(*b, Tensor::new(vec![n], db)?);
                    acc(*x, g);
                }
                Op::MulRow(x, gain) => {
                    let gv = self.value(*gain).data();
                    let n = gv.len();
                    let xv = self.value(*x).data();
                    let mut dgain = vec![0.0; n];
                    let mut dx = g.clone();
                    for (i, d) in dx.data_mut().iter_mut().enumerate() {
                        dgain[i % n] += *d * xv[i];
                        *d *= gv[i % n];
                    }
                    acc(*gain, Tensor::new(vec![n], dgain)?);
                    acc(*x, dx);
                }
                Op::AddCol(x, b) => {
                    let rows = self.value(*b).len();
                    let cols = g.len() / rows.max(1);
                    let db = (0..rows)
                        .map(|r| g.data()[r * cols..(r + 1) * cols].iter().sum())
                        .collect();
                    acc(*b, Tensor::new(vec![rows], db)?);
                    acc(*x, g);
                }
                Op::Concat(parts) => {
                    let total = g.last_dim();
                    let rows = g.len() / total.max(1);
                    let mut offset = 0;
                    for &p in parts {
                        let pv = self.value(p);
                        let w = pv.last_dim();
                        let mut d = Vec::with_capacity(pv.len());
                        for r in 0..rows {
                            d.extend_from_slice(&g.data()[r * total + offset..r * total + offset + w]);
                        }
                        offset += w;
                        acc(p, Tensor::new(pv.shape().to_vec(), d)?);
                    }
                }
                Op::Transpose(x) => acc(*x, g.transpose_last2()?),
                Op::Reshape(x) => acc(*x, g.reshape(self.shape(*x))?),
                Op::GatherRows(x, indices) => {
                    let xv = self.value(*x);
                    let cols = xv.shape()[1];
                    let mut d = Tensor::zeros(xv.shape());
                    for (out_row, &src) in indices.iter().enumerate() {
                        let gs = &g.data()[out_row * cols..(out_row + 1) * cols];
                        d.data_mut()[src * cols..(src + 1) * cols]
                            .iter_mut()
                            .zip(gs)
                            .for_each(|(a, b)| *a += b);
                    }
                    acc(*x, d);
                }
                Op::Softmax(x) => {
                    let y = &node.value;
                    let cols = y.last_dim().max(1);
                    let mut d = g.clone();
                    for (drow, yrow) in d.data_mut().chunks_mut(cols).zip(y.data().chunks(cols)) {
                        let inner: f64 = drow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        drow.iter_mut().zip(yrow).for_each(|(dv, yv)| *dv = yv * (*dv - inner));
                    }
                    acc(*x, d);
                }
                Op::Normalize(x, eps) => {
                    let xv = self.value(*x);
                    let y = &node.value;
                    let cols = y.last_dim().max(1);
                    let mut d = g.clone();
                    for ((drow, yrow), xrow) in d
                        .data_mut()
                        .chunks_mut(cols)
                        .zip(y.data().chunks(cols))
                        .zip(xv.data().chunks(cols))
                    {
                        let mean = xrow.iter().sum::<f64>() / cols as f64;
                        let var = xrow.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
                        let inv = 1.0 / (var + eps).sqrt();
                        let g_mean = drow.iter().sum::<f64>() / cols as f64;
                        let gy_mean = drow.iter().zip(yrow).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
                        drow.iter_mut()
                            .zip(yrow)
                            .for_each(|(dv, yv)| *dv = inv * (*dv - g_mean - yv * gy_mean));
                    }
                    acc(*x, d);
                }
                Op::Gelu(x) => acc(*x, g.zip_map(self.value(*x), |d, v| d * gelu_grad(v))),
                Op::Abs(x) => acc(*x, g.zip_map(self.value(*x), |d, v| d * v.signum() * (v != 0.0) as u8 as f64)),
                Op::Huber(x, delta) => {
                    let delta = *delta;
                    acc(*x, g.zip_map(self.value(*x), |d, v| d * v.clamp(-delta, delta)))
                }
                Op::Sum(x) => acc(*x, Tensor::filled(self.shape(*x), g.item())),
            }
        }
        Ok(out)
    }
}
