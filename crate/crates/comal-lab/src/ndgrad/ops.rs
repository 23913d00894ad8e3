//! Primitive operations and their vector-Jacobian products.

use super::kernels;
use super::{Tensor, LOG_EPS};
use crate::{Error, Real, Result};

/// Recorded operation node. Each variant holds the inputs needed to replay
/// the chain rule; ops whose derivative is cheapest in terms of the output
/// read it from the node passed to [`Op::vjp`].
pub enum Op {
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    Div(Tensor, Tensor),
    AddScalar(Tensor),
    MulScalar(Tensor, Real),
    Exp(Tensor),
    Log { x: Tensor, eps: Real },
    Tanh(Tensor),
    Pow { x: Tensor, e: Real },
    Matmul(Tensor, Tensor),
    Conv2d { input: Tensor, kernel: Tensor, pad: usize },
    AddBias { x: Tensor, bias: Tensor },
    SumAll(Tensor),
    MeanAll(Tensor),
    SumAxis { x: Tensor, axis: usize },
    MeanAxis { x: Tensor, axis: usize },
    MaxAxis { x: Tensor, axis: usize, argmax: Vec<usize> },
    Reshape(Tensor),
    Transpose { x: Tensor, a: usize, b: usize },
    Slice { x: Tensor, axis: usize, start: usize },
    Concat { xs: Vec<Tensor>, axis: usize },
    Softmax { x: Tensor, axis: usize },
    MaskedSoftmaxLast { x: Tensor, allowed: Vec<bool> },
    Gather { x: Tensor, axis: usize, idx: Vec<usize> },
    TakePerRow { x: Tensor, idx: Vec<usize> },
    LayerNorm { x: Tensor, gain: Tensor, bias: Tensor, eps: Real },
}

/// (outer, axis_len, inner) decomposition for per-axis walks.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn unary<F: Fn(Real) -> Real>(x: &Tensor, f: F) -> Vec<Real> {
    x.data().iter().map(|&v| f(v)).collect()
}

fn binary<F: Fn(Real, Real) -> Real>(a: &Tensor, b: &Tensor, f: F) -> Vec<Real> {
    a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect()
}

impl Tensor {
    fn result(&self, data: Vec<Real>, shape: Vec<usize>, op: Op) -> Tensor {
        let requires = op.inputs().iter().any(|t| t.requires_grad());
        Tensor::make(data, shape, requires, if requires { Some(op) } else { None })
    }

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        same_shape("add", self, rhs)?;
        let data = binary(self, rhs, |a, b| a + b);
        Ok(self.result(data, self.shape().to_vec(), Op::Add(self.clone(), rhs.clone())))
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        same_shape("sub", self, rhs)?;
        let data = binary(self, rhs, |a, b| a - b);
        Ok(self.result(data, self.shape().to_vec(), Op::Sub(self.clone(), rhs.clone())))
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        same_shape("mul", self, rhs)?;
        let data = binary(self, rhs, |a, b| a * b);
        Ok(self.result(data, self.shape().to_vec(), Op::Mul(self.clone(), rhs.clone())))
    }

    pub fn div(&self, rhs: &Tensor) -> Result<Tensor> {
        same_shape("div", self, rhs)?;
        if rhs.data().iter().any(|&v| v == 0.0) {
            return Err(Error::NonFinite {
                context: "div: zero divisor".into(),
            });
        }
        let data = binary(self, rhs, |a, b| a / b);
        Ok(self.result(data, self.shape().to_vec(), Op::Div(self.clone(), rhs.clone())))
    }

    pub fn add_scalar(&self, c: Real) -> Tensor {
        let data = unary(self, |v| v + c);
        self.result(data, self.shape().to_vec(), Op::AddScalar(self.clone()))
    }

    pub fn mul_scalar(&self, c: Real) -> Tensor {
        let data = unary(self, |v| v * c);
        self.result(data, self.shape().to_vec(), Op::MulScalar(self.clone(), c))
    }

    pub fn neg(&self) -> Tensor {
        self.mul_scalar(-1.0)
    }

    pub fn exp(&self) -> Tensor {
        let data = unary(self, Real::exp);
        self.result(data, self.shape().to_vec(), Op::Exp(self.clone()))
    }

    /// Natural log with the default argument clamp (`LOG_EPS`).
    pub fn log(&self) -> Tensor {
        self.log_eps(LOG_EPS)
    }

    /// Natural log of `max(x, eps)`; the gradient is zero below the clamp.
    pub fn log_eps(&self, eps: Real) -> Tensor {
        let data = unary(self, |v| v.max(eps).ln());
        self.result(data, self.shape().to_vec(), Op::Log { x: self.clone(), eps })
    }

    pub fn tanh(&self) -> Tensor {
        let data = unary(self, fast_tanh);
        self.result(data, self.shape().to_vec(), Op::Tanh(self.clone()))
    }

    /// Elementwise power with a fixed real exponent.
    pub fn powf(&self, e: Real) -> Tensor {
        let data = unary(self, |v| v.powf(e));
        self.result(data, self.shape().to_vec(), Op::Pow { x: self.clone(), e })
    }

    /// 2-D matrix product.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        if self.rank() != 2 || rhs.rank() != 2 || self.shape()[1] != rhs.shape()[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.shape().to_vec(),
                rhs: rhs.shape().to_vec(),
            });
        }
        let (m, k) = (self.shape()[0], self.shape()[1]);
        let n = rhs.shape()[1];
        let data = kernels::matmul(self.data(), rhs.data(), m, k, n);
        Ok(self.result(data, vec![m, n], Op::Matmul(self.clone(), rhs.clone())))
    }

    /// 2-D convolution over channels-last input (h,w,ci) with kernel
    /// (kh,kw,ci,co), stride 1, zero padding `pad`.
    pub fn conv2d(&self, kernel: &Tensor, pad: usize) -> Result<Tensor> {
        if self.rank() != 3 || kernel.rank() != 4 || self.shape()[2] != kernel.shape()[2] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: self.shape().to_vec(),
                rhs: kernel.shape().to_vec(),
            });
        }
        let (h, w, ci) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        let (kh, kw, co) = (kernel.shape()[0], kernel.shape()[1], kernel.shape()[3]);
        if h + 2 * pad + 1 <= kh || w + 2 * pad + 1 <= kw {
            return Err(Error::InvalidArg(format!(
                "conv2d: kernel {:?} larger than padded input {:?}",
                kernel.shape(),
                self.shape()
            )));
        }
        let data = kernels::conv2d(self.data(), kernel.data(), h, w, ci, kh, kw, co, pad);
        let oh = h + 2 * pad + 1 - kh;
        let ow = w + 2 * pad + 1 - kw;
        Ok(self.result(
            data,
            vec![oh, ow, co],
            Op::Conv2d {
                input: self.clone(),
                kernel: kernel.clone(),
                pad,
            },
        ))
    }

    /// Add a vector over the last axis (bias of a linear/conv layer).
    pub fn add_bias(&self, bias: &Tensor) -> Result<Tensor> {
        let c = *self.shape().last().unwrap();
        if bias.rank() != 1 || bias.shape()[0] != c {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                lhs: self.shape().to_vec(),
                rhs: bias.shape().to_vec(),
            });
        }
        let b = bias.data();
        let mut data = self.data().to_vec();
        for row in data.chunks_mut(c) {
            for (v, &bv) in row.iter_mut().zip(b) {
                *v += bv;
            }
        }
        Ok(self.result(
            data,
            self.shape().to_vec(),
            Op::AddBias {
                x: self.clone(),
                bias: bias.clone(),
            },
        ))
    }

    pub fn sum_all(&self) -> Tensor {
        let s: Real = self.data().iter().sum();
        self.result(vec![s], vec![1], Op::SumAll(self.clone()))
    }

    pub fn mean_all(&self) -> Tensor {
        let s: Real = self.data().iter().sum();
        let n = self.len() as Real;
        self.result(vec![s / n], vec![1], Op::MeanAll(self.clone()))
    }

    fn reduced_shape(&self, axis: usize) -> Vec<usize> {
        let mut s: Vec<usize> = self.shape().to_vec();
        s.remove(axis);
        if s.is_empty() {
            s.push(1);
        }
        s
    }

    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        self.check_axis("sum_axis", axis)?;
        let (outer, alen, inner) = axis_split(self.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..alen {
                let base = (o * alen + k) * inner;
                let orow = &mut out[o * inner..(o + 1) * inner];
                for i in 0..inner {
                    orow[i] += self.data()[base + i];
                }
            }
        }
        Ok(self.result(out, self.reduced_shape(axis), Op::SumAxis { x: self.clone(), axis }))
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Tensor> {
        self.check_axis("mean_axis", axis)?;
        let (outer, alen, inner) = axis_split(self.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..alen {
                let base = (o * alen + k) * inner;
                let orow = &mut out[o * inner..(o + 1) * inner];
                for i in 0..inner {
                    orow[i] += self.data()[base + i];
                }
            }
        }
        let nx = alen as Real;
        out.iter_mut().for_each(|v| *v /= nx);
        Ok(self.result(out, self.reduced_shape(axis), Op::MeanAxis { x: self.clone(), axis }))
    }

    /// Per-axis maximum; ties route the gradient to the first maximum.
    pub fn max_axis(&self, axis: usize) -> Result<Tensor> {
        self.check_axis("max_axis", axis)?;
        let (outer, alen, inner) = axis_split(self.shape(), axis);
        let mut out = vec![Real::NEG_INFINITY; outer * inner];
        let mut argmax = vec![0usize; outer * inner];
        for o in 0..outer {
            for k in 0..alen {
                let base = (o * alen + k) * inner;
                for i in 0..inner {
                    let v = self.data()[base + i];
                    let slot = o * inner + i;
                    if v > out[slot] {
                        out[slot] = v;
                        argmax[slot] = k;
                    }
                }
            }
        }
        Ok(self.result(
            out,
            self.reduced_shape(axis),
            Op::MaxAxis {
                x: self.clone(),
                axis,
                argmax,
            },
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if shape.is_empty() || shape.iter().any(|&e| e == 0) || numel != self.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        Ok(self.result(self.data().to_vec(), shape.to_vec(), Op::Reshape(self.clone())))
    }

    /// Swap two axes (materialized).
    pub fn transpose(&self, a: usize, b: usize) -> Result<Tensor> {
        self.check_axis("transpose", a)?;
        self.check_axis("transpose", b)?;
        let data = transpose_data(self.data(), self.shape(), a, b);
        let mut shape = self.shape().to_vec();
        shape.swap(a, b);
        Ok(self.result(data, shape, Op::Transpose { x: self.clone(), a, b }))
    }

    /// Contiguous range along one axis.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        self.check_axis("slice", axis)?;
        let (outer, alen, inner) = axis_split(self.shape(), axis);
        if len == 0 || start + len > alen {
            return Err(Error::InvalidArg(format!(
                "slice: range {start}..{} out of bounds for axis length {alen}",
                start + len
            )));
        }
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * alen + start) * inner;
            out.extend_from_slice(&self.data()[base..base + len * inner]);
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        Ok(self.result(
            out,
            shape,
            Op::Slice {
                x: self.clone(),
                axis,
                start,
            },
        ))
    }

    pub fn concat(xs: &[Tensor], axis: usize) -> Result<Tensor> {
        if xs.is_empty() {
            return Err(Error::InvalidArg("concat: no inputs".into()));
        }
        let first = &xs[0];
        first.check_axis("concat", axis)?;
        for x in &xs[1..] {
            let mut a = first.shape().to_vec();
            let mut b = x.shape().to_vec();
            a.remove(axis);
            if x.rank() != first.rank() {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first.shape().to_vec(),
                    rhs: x.shape().to_vec(),
                });
            }
            b.remove(axis);
            if a != b {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first.shape().to_vec(),
                    rhs: x.shape().to_vec(),
                });
            }
        }
        let (outer, _, inner) = axis_split(first.shape(), axis);
        let total_axis: usize = xs.iter().map(|x| x.shape()[axis]).sum();
        let mut out = Vec::with_capacity(outer * total_axis * inner);
        for o in 0..outer {
            for x in xs {
                let alen = x.shape()[axis];
                let base = o * alen * inner;
                out.extend_from_slice(&x.data()[base..base + alen * inner]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total_axis;
        let op = Op::Concat {
            xs: xs.to_vec(),
            axis,
        };
        Ok(first.result(out, shape, op))
    }

    /// Normalized exponential over the chosen axis; output sums to 1 along it.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        self.check_axis("softmax", axis)?;
        let (outer, alen, inner) = axis_split(self.shape(), axis);
        let mut out = vec![0.0; self.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * alen + k) * inner + i;
                let mut mx = Real::NEG_INFINITY;
                for k in 0..alen {
                    mx = mx.max(self.data()[at(k)]);
                }
                let mut z = 0.0;
                for k in 0..alen {
                    let e = (self.data()[at(k)] - mx).exp();
                    out[at(k)] = e;
                    z += e;
                }
                for k in 0..alen {
                    out[at(k)] /= z;
                }
            }
        }
        Ok(self.result(out, self.shape().to_vec(), Op::Softmax { x: self.clone(), axis }))
    }

    /// Softmax over the last axis where only `allowed` positions receive
    /// mass; gated-out positions are exactly zero after normalization.
    pub fn masked_softmax_last(&self, allowed: &[bool]) -> Result<Tensor> {
        if allowed.len() != self.len() {
            return Err(Error::InvalidArg(format!(
                "masked_softmax_last: mask length {} != tensor length {}",
                allowed.len(),
                self.len()
            )));
        }
        let c = *self.shape().last().unwrap();
        let mut out = vec![0.0; self.len()];
        for (r, row) in self.data().chunks(c).enumerate() {
            let m = &allowed[r * c..(r + 1) * c];
            let orow = &mut out[r * c..(r + 1) * c];
            if m.iter().all(|&ok| ok) {
                // branch-free path for fully admissible rows
                let mx = row.iter().cloned().fold(Real::NEG_INFINITY, Real::max);
                let mut z = 0.0;
                for (o, &v) in orow.iter_mut().zip(row) {
                    let e = (v - mx).exp();
                    *o = e;
                    z += e;
                }
                let inv = 1.0 / z;
                orow.iter_mut().for_each(|v| *v *= inv);
                continue;
            }
            if c > 1 && !m[c - 1] && m[..c - 1].iter().all(|&ok| ok) {
                // common gate shape: everything admissible but the tail column
                let body = &row[..c - 1];
                let mx = body.iter().cloned().fold(Real::NEG_INFINITY, Real::max);
                let mut z = 0.0;
                for (o, &v) in orow[..c - 1].iter_mut().zip(body) {
                    let e = (v - mx).exp();
                    *o = e;
                    z += e;
                }
                let inv = 1.0 / z;
                orow[..c - 1].iter_mut().for_each(|v| *v *= inv);
                continue;
            }
            let mut mx = Real::NEG_INFINITY;
            for (v, &ok) in row.iter().zip(m) {
                if ok {
                    mx = mx.max(*v);
                }
            }
            if mx == Real::NEG_INFINITY {
                return Err(Error::InvalidArg(format!(
                    "masked_softmax_last: row {r} has no allowed position"
                )));
            }
            let mut z = 0.0;
            for ((o, &v), &ok) in orow.iter_mut().zip(row).zip(m) {
                if ok {
                    let e = (v - mx).exp();
                    *o = e;
                    z += e;
                }
            }
            let inv = 1.0 / z;
            orow.iter_mut().for_each(|v| *v *= inv);
        }
        Ok(self.result(
            out,
            self.shape().to_vec(),
            Op::MaskedSoftmaxLast {
                x: self.clone(),
                allowed: allowed.to_vec(),
            },
        ))
    }

    /// Select `idx` entries along `axis` (repeats allowed).
    pub fn gather(&self, axis: usize, idx: &[usize]) -> Result<Tensor> {
        self.check_axis("gather", axis)?;
        let (outer, alen, inner) = axis_split(self.shape(), axis);
        if idx.is_empty() {
            return Err(Error::InvalidArg("gather: empty index list".into()));
        }
        if let Some(&bad) = idx.iter().find(|&&j| j >= alen) {
            return Err(Error::InvalidArg(format!(
                "gather: index {bad} out of bounds for axis length {alen}"
            )));
        }
        let mut out = Vec::with_capacity(outer * idx.len() * inner);
        for o in 0..outer {
            for &j in idx {
                let base = (o * alen + j) * inner;
                out.extend_from_slice(&self.data()[base..base + inner]);
            }
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = idx.len();
        Ok(self.result(
            out,
            shape,
            Op::Gather {
                x: self.clone(),
                axis,
                idx: idx.to_vec(),
            },
        ))
    }

    /// From a (rows, cols) tensor pick one column per row.
    pub fn take_per_row(&self, idx: &[usize]) -> Result<Tensor> {
        if self.rank() != 2 || idx.len() != self.shape()[0] {
            return Err(Error::InvalidArg(format!(
                "take_per_row: need (rows, cols) tensor and one index per row, got {:?} with {} indices",
                self.shape(),
                idx.len()
            )));
        }
        let c = self.shape()[1];
        if let Some(&bad) = idx.iter().find(|&&j| j >= c) {
            return Err(Error::InvalidArg(format!(
                "take_per_row: column {bad} out of bounds ({c} columns)"
            )));
        }
        let out: Vec<Real> = idx
            .iter()
            .enumerate()
            .map(|(r, &j)| self.data()[r * c + j])
            .collect();
        Ok(self.result(
            out,
            vec![idx.len()],
            Op::TakePerRow {
                x: self.clone(),
                idx: idx.to_vec(),
            },
        ))
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm(&self, gain: &Tensor, bias: &Tensor, eps: Real) -> Result<Tensor> {
        let c = *self.shape().last().unwrap();
        if gain.shape() != [c] || bias.shape() != [c] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: self.shape().to_vec(),
                rhs: gain.shape().to_vec(),
            });
        }
        let mut out = vec![0.0; self.len()];
        for (r, row) in self.data().chunks(c).enumerate() {
            let (mu, inv_std) = row_stats(row, eps);
            let orow = &mut out[r * c..(r + 1) * c];
            for k in 0..c {
                orow[k] = gain.data()[k] * (row[k] - mu) * inv_std + bias.data()[k];
            }
        }
        Ok(self.result(
            out,
            self.shape().to_vec(),
            Op::LayerNorm {
                x: self.clone(),
                gain: gain.clone(),
                bias: bias.clone(),
                eps,
            },
        ))
    }

    fn check_axis(&self, op: &'static str, axis: usize) -> Result<()> {
        if axis >= self.rank() {
            return Err(Error::InvalidArg(format!(
                "{op}: axis {axis} out of range for shape {:?}",
                self.shape()
            )));
        }
        Ok(())
    }
}

/// tanh through a single exp (libm tanh costs ~4x more); odd, monotone,
/// exactly 0 at 0 and saturating to +/-1 without overflow.
#[inline]
fn fast_tanh(x: Real) -> Real {
    if x >= 0.0 {
        let e = (-2.0 * x).exp();
        (1.0 - e) / (1.0 + e)
    } else {
        let e = (2.0 * x).exp();
        (e - 1.0) / (e + 1.0)
    }
}

fn row_stats(row: &[Real], eps: Real) -> (Real, Real) {
    let n = row.len() as Real;
    let mu: Real = row.iter().sum::<Real>() / n;
    let var: Real = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<Real>() / n;
    (mu, 1.0 / (var + eps).sqrt())
}

fn transpose_data(data: &[Real], shape: &[usize], a: usize, b: usize) -> Vec<Real> {
    if a == b {
        return data.to_vec();
    }
    let rank = shape.len();
    let mut strides = vec![1usize; rank];
    for i in (0..rank - 1).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let mut new_shape = shape.to_vec();
    new_shape.swap(a, b);
    let mut new_strides = strides.clone();
    new_strides.swap(a, b);
    let mut out = vec![0.0; data.len()];
    let mut idx = vec![0usize; rank];
    for (pos, slot) in out.iter_mut().enumerate() {
        // decode pos in the new shape, read via swapped strides
        let mut rem = pos;
        for (i, &e) in new_shape.iter().enumerate() {
            let stride: usize = new_shape[i + 1..].iter().product();
            idx[i] = rem / stride;
            rem %= stride;
            debug_assert!(idx[i] < e);
        }
        let src: usize = idx.iter().zip(&new_strides).map(|(&i, &s)| i * s).sum();
        *slot = data[src];
    }
    out
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::AddScalar(..) => "add_scalar",
            Op::MulScalar(..) => "mul_scalar",
            Op::Exp(..) => "exp",
            Op::Log { .. } => "log",
            Op::Tanh(..) => "tanh",
            Op::Pow { .. } => "pow",
            Op::Matmul(..) => "matmul",
            Op::Conv2d { .. } => "conv2d",
            Op::AddBias { .. } => "add_bias",
            Op::SumAll(..) => "sum_all",
            Op::MeanAll(..) => "mean_all",
            Op::SumAxis { .. } => "sum_axis",
            Op::MeanAxis { .. } => "mean_axis",
            Op::MaxAxis { .. } => "max_axis",
            Op::Reshape(..) => "reshape",
            Op::Transpose { .. } => "transpose",
            Op::Slice { .. } => "slice",
            Op::Concat { .. } => "concat",
            Op::Softmax { .. } => "softmax",
            Op::MaskedSoftmaxLast { .. } => "masked_softmax_last",
            Op::Gather { .. } => "gather",
            Op::TakePerRow { .. } => "take_per_row",
            Op::LayerNorm { .. } => "layer_norm",
        }
    }

    pub(crate) fn inputs(&self) -> Vec<&Tensor> {
        match self {
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::Matmul(a, b) => {
                vec![a, b]
            }
            Op::AddScalar(x)
            | Op::MulScalar(x, _)
            | Op::Exp(x)
            | Op::Tanh(x)
            | Op::SumAll(x)
            | Op::MeanAll(x)
            | Op::Reshape(x) => vec![x],
            Op::Log { x, .. }
            | Op::Pow { x, .. }
            | Op::SumAxis { x, .. }
            | Op::MeanAxis { x, .. }
            | Op::MaxAxis { x, .. }
            | Op::Transpose { x, .. }
            | Op::Slice { x, .. }
            | Op::Softmax { x, .. }
            | Op::MaskedSoftmaxLast { x, .. }
            | Op::Gather { x, .. }
            | Op::TakePerRow { x, .. } => vec![x],
            Op::Conv2d { input, kernel, .. } => vec![input, kernel],
            Op::AddBias { x, bias } => vec![x, bias],
            Op::Concat { xs, .. } => xs.iter().collect(),
            Op::LayerNorm { x, gain, bias, .. } => vec![x, gain, bias],
        }
    }

    /// Gradients flowing to each input that requires one.
    pub(crate) fn vjp(&self, node: &Tensor, g: &[Real]) -> Vec<(Tensor, Vec<Real>)> {
        let mut out: Vec<(Tensor, Vec<Real>)> = Vec::new();
        let mut push = |t: &Tensor, grad: Vec<Real>| {
            if t.requires_grad() {
                out.push((t.clone(), grad));
            }
        };
        match self {
            Op::Add(a, b) => {
                push(a, g.to_vec());
                push(b, g.to_vec());
            }
            Op::Sub(a, b) => {
                push(a, g.to_vec());
                push(b, g.iter().map(|&v| -v).collect());
            }
            Op::Mul(a, b) => {
                if a.requires_grad() {
                    push(a, g.iter().zip(b.data()).map(|(&gv, &bv)| gv * bv).collect());
                }
                if b.requires_grad() {
                    push(b, g.iter().zip(a.data()).map(|(&gv, &av)| gv * av).collect());
                }
            }
            Op::Div(a, b) => {
                if a.requires_grad() {
                    push(a, g.iter().zip(b.data()).map(|(&gv, &bv)| gv / bv).collect());
                }
                if b.requires_grad() {
                    let gb = g
                        .iter()
                        .zip(a.data().iter().zip(b.data()))
                        .map(|(&gv, (&av, &bv))| -gv * av / (bv * bv))
                        .collect();
                    push(b, gb);
                }
            }
            Op::AddScalar(x) => push(x, g.to_vec()),
            Op::MulScalar(x, c) => push(x, g.iter().map(|&v| v * c).collect()),
            Op::Exp(x) => push(x, g.iter().zip(node.data()).map(|(&gv, &y)| gv * y).collect()),
            Op::Log { x, eps } => {
                let gx = g
                    .iter()
                    .zip(x.data())
                    .map(|(&gv, &xv)| if xv > *eps { gv / xv } else { 0.0 })
                    .collect();
                push(x, gx);
            }
            Op::Tanh(x) => {
                let gx = g
                    .iter()
                    .zip(node.data())
                    .map(|(&gv, &y)| gv * (1.0 - y * y))
                    .collect();
                push(x, gx);
            }
            Op::Pow { x, e } => {
                let gx = g
                    .iter()
                    .zip(x.data())
                    .map(|(&gv, &xv)| gv * e * xv.powf(e - 1.0))
                    .collect();
                push(x, gx);
            }
            Op::Matmul(a, b) => {
                let (m, k) = (a.shape()[0], a.shape()[1]);
                let n = b.shape()[1];
                if a.requires_grad() {
                    let mut ga = vec![0.0; m * k];
                    kernels::matmul_nt_acc(g, b.data(), &mut ga, m, n, k);
                    push(a, ga);
                }
                if b.requires_grad() {
                    let mut gb = vec![0.0; k * n];
                    kernels::matmul_tn_acc(a.data(), g, &mut gb, m, k, n);
                    push(b, gb);
                }
            }
            Op::Conv2d { input, kernel, pad } => {
                let (h, w, ci) = (input.shape()[0], input.shape()[1], input.shape()[2]);
                let (kh, kw, co) = (kernel.shape()[0], kernel.shape()[1], kernel.shape()[3]);
                if input.requires_grad() {
                    push(
                        input,
                        kernels::conv2d_grad_input(g, kernel.data(), h, w, ci, kh, kw, co, *pad),
                    );
                }
                if kernel.requires_grad() {
                    push(
                        kernel,
                        kernels::conv2d_grad_kernel(g, input.data(), h, w, ci, kh, kw, co, *pad),
                    );
                }
            }
            Op::AddBias { x, bias } => {
                push(x, g.to_vec());
                if bias.requires_grad() {
                    let c = bias.len();
                    let mut gb = vec![0.0; c];
                    for row in g.chunks(c) {
                        for (acc, &v) in gb.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    push(bias, gb);
                }
            }
            Op::SumAll(x) => push(x, vec![g[0]; x.len()]),
            Op::MeanAll(x) => push(x, vec![g[0] / x.len() as Real; x.len()]),
            Op::SumAxis { x, axis } => {
                let (outer, alen, inner) = axis_split(x.shape(), *axis);
                let mut gx = vec![0.0; x.len()];
                for o in 0..outer {
                    for k in 0..alen {
                        let base = (o * alen + k) * inner;
                        for i in 0..inner {
                            gx[base + i] = g[o * inner + i];
                        }
                    }
                }
                push(x, gx);
            }
            Op::MeanAxis { x, axis } => {
                let (outer, alen, inner) = axis_split(x.shape(), *axis);
                let scale = 1.0 / alen as Real;
                let mut gx = vec![0.0; x.len()];
                for o in 0..outer {
                    for k in 0..alen {
                        let base = (o * alen + k) * inner;
                        for i in 0..inner {
                            gx[base + i] = g[o * inner + i] * scale;
                        }
                    }
                }
                push(x, gx);
            }
            Op::MaxAxis { x, axis, argmax } => {
                let (outer, alen, inner) = axis_split(x.shape(), *axis);
                let mut gx = vec![0.0; x.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let slot = o * inner + i;
                        let k = argmax[slot];
                        gx[(o * alen + k) * inner + i] = g[slot];
                    }
                }
                push(x, gx);
            }
            Op::Reshape(x) => push(x, g.to_vec()),
            Op::Transpose { x, a, b } => {
                // gradient maps back through the inverse (same) swap
                let mut ns = x.shape().to_vec();
                ns.swap(*a, *b);
                push(x, transpose_data(g, &ns, *a, *b));
            }
            Op::Slice { x, axis, start } => {
                let (outer, alen, inner) = axis_split(x.shape(), *axis);
                let len = node.shape()[*axis];
                let mut gx = vec![0.0; x.len()];
                for o in 0..outer {
                    let dst = (o * alen + start) * inner;
                    let src = o * len * inner;
                    gx[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                push(x, gx);
            }
            Op::Concat { xs, axis } => {
                let (outer, _, inner) = axis_split(node.shape(), *axis);
                let total = node.shape()[*axis];
                let mut offset = 0usize;
                for x in xs {
                    let alen = x.shape()[*axis];
                    if x.requires_grad() {
                        let mut gx = vec![0.0; x.len()];
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            let dst = o * alen * inner;
                            gx[dst..dst + alen * inner].copy_from_slice(&g[src..src + alen * inner]);
                        }
                        push(x, gx);
                    }
                    offset += alen;
                }
            }
            Op::Softmax { x, axis } => {
                let (outer, alen, inner) = axis_split(x.shape(), *axis);
                let y = node.data();
                let mut gx = vec![0.0; x.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| (o * alen + k) * inner + i;
                        let mut dot = 0.0;
                        for k in 0..alen {
                            dot += g[at(k)] * y[at(k)];
                        }
                        for k in 0..alen {
                            gx[at(k)] = y[at(k)] * (g[at(k)] - dot);
                        }
                    }
                }
                push(x, gx);
            }
            Op::MaskedSoftmaxLast { x, .. } => {
                // masked-out outputs are exactly zero, so the ordinary
                // softmax Jacobian already routes them no gradient
                let c = *x.shape().last().unwrap();
                let y = node.data();
                let mut gx = vec![0.0; x.len()];
                for r in 0..x.len() / c {
                    let base = r * c;
                    let mut dot = 0.0;
                    for k in 0..c {
                        dot += g[base + k] * y[base + k];
                    }
                    for k in 0..c {
                        gx[base + k] = y[base + k] * (g[base + k] - dot);
                    }
                }
                push(x, gx);
            }
            Op::Gather { x, axis, idx } => {
                let (outer, alen, inner) = axis_split(x.shape(), *axis);
                let mut gx = vec![0.0; x.len()];
                for o in 0..outer {
                    for (j, &src_k) in idx.iter().enumerate() {
                        let src = (o * idx.len() + j) * inner;
                        let dst = (o * alen + src_k) * inner;
                        for i in 0..inner {
                            gx[dst + i] += g[src + i];
                        }
                    }
                }
                push(x, gx);
            }
            Op::TakePerRow { x, idx } => {
                let c = x.shape()[1];
                let mut gx = vec![0.0; x.len()];
                for (r, &j) in idx.iter().enumerate() {
                    gx[r * c + j] += g[r];
                }
                push(x, gx);
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let c = *x.shape().last().unwrap();
                let rows = x.len() / c;
                let mut gx = vec![0.0; x.len()];
                let mut ggain = vec![0.0; c];
                let mut gbias = vec![0.0; c];
                for r in 0..rows {
                    let row = &x.data()[r * c..(r + 1) * c];
                    let grow = &g[r * c..(r + 1) * c];
                    let (mu, inv_std) = row_stats(row, *eps);
                    let n = c as Real;
                    let mut mean_dxhat = 0.0;
                    let mut mean_dxhat_xhat = 0.0;
                    for k in 0..c {
                        let xhat = (row[k] - mu) * inv_std;
                        let dxhat = grow[k] * gain.data()[k];
                        mean_dxhat += dxhat;
                        mean_dxhat_xhat += dxhat * xhat;
                        ggain[k] += grow[k] * xhat;
                        gbias[k] += grow[k];
                    }
                    mean_dxhat /= n;
                    mean_dxhat_xhat /= n;
                    for k in 0..c {
                        let xhat = (row[k] - mu) * inv_std;
                        let dxhat = grow[k] * gain.data()[k];
                        gx[r * c + k] = inv_std * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
                    }
                }
                push(x, gx);
                push(gain, ggain);
                push(bias, gbias);
            }
        }
        out
    }
}
