//! Primitive operation set and forward kernels.
//!
//! Every primitive's derivative is itself expressed with primitives from this
//! set (see `backward.rs`), which is what makes recorded backward passes
//! differentiable again.

use std::sync::Arc;

use smallvec::SmallVec;

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    Leaf,
    Constant,
    Add,
    Sub,
    Mul,
    Neg,
    Scale(f64),
    AddScalar(f64),
    /// `t * s` for a single-element tensor `s`.
    ScaleBy,
    /// `[m,k]x[k,n]` or batched `[b,m,k]x[b,k,n]`.
    MatMul,
    /// Swap of the two trailing axes.
    Transpose,
    Reshape(SmallVec<[usize; 4]>),
    Permute(SmallVec<[usize; 4]>),
    Sum,
    /// Scalar broadcast to a full shape.
    Fill(SmallVec<[usize; 4]>),
    SumLast,
    ExpandLast(usize),
    SumLeading,
    BroadcastLeading(usize),
    Softmax,
    Tanh,
    Relu,
    Exp,
    Square,
    Sqrt,
    Recip,
    /// Row selection along axis 0.
    Gather(Arc<[usize]>),
    /// Adjoint of `Gather`: rows are summed into a zero tensor with `rows` rows.
    Scatter { idx: Arc<[usize]>, rows: usize },
    /// Concatenation along axis 0.
    Concat,
    /// Mean softmax cross-entropy of `[b,c]` logits against class targets.
    CrossEntropy(Arc<[usize]>),
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::Add => "add",
            Op::Sub => "subtract",
            Op::Mul => "multiply",
            Op::Neg => "negate",
            Op::Scale(_) => "scale",
            Op::AddScalar(_) => "add-scalar",
            Op::ScaleBy => "scale-by",
            Op::MatMul => "matmul",
            Op::Transpose => "transpose",
            Op::Reshape(_) => "reshape",
            Op::Permute(_) => "permute",
            Op::Sum => "sum",
            Op::Fill(_) => "fill",
            Op::SumLast => "sum-last",
            Op::ExpandLast(_) => "expand-last",
            Op::SumLeading => "sum-leading",
            Op::BroadcastLeading(_) => "broadcast-leading",
            Op::Softmax => "softmax",
            Op::Tanh => "tanh",
            Op::Relu => "relu",
            Op::Exp => "exp",
            Op::Square => "square",
            Op::Sqrt => "sqrt",
            Op::Recip => "reciprocal",
            Op::Gather(_) => "gather",
            Op::Scatter { .. } => "scatter",
            Op::Concat => "concat",
            Op::CrossEntropy(_) => "cross-entropy",
        }
    }
}

fn same_shape(op: &Op, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op.name(), &[a.shape(), b.shape()]));
    }
    Ok(())
}

fn unary(x: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    let data = x.data().iter().map(|&v| f(v)).collect();
    Tensor::new(x.shape().to_vec(), data).expect("shape preserved")
}

fn binary(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("shape preserved")
}

fn arity(op: &Op, inputs: &[&Tensor], n: usize) -> Result<()> {
    if inputs.len() != n {
        return Err(Error::Autodiff(format!(
            "{} expects {n} inputs, got {}",
            op.name(),
            inputs.len()
        )));
    }
    Ok(())
}

pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

fn matmul(op: &Op, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (sa, sb) = (a.shape(), b.shape());
    match (sa.len(), sb.len()) {
        (2, 2) if sa[1] == sb[0] => {
            let (m, k, n) = (sa[0], sa[1], sb[1]);
            let mut out = vec![0.0; m * n];
            matmul_into(a.data(), b.data(), &mut out, m, k, n);
            Tensor::new(vec![m, n], out)
        }
        (3, 3) if sa[0] == sb[0] && sa[2] == sb[1] => {
            let (bt, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
            let mut out = vec![0.0; bt * m * n];
            for i in 0..bt {
                matmul_into(
                    &a.data()[i * m * k..(i + 1) * m * k],
                    &b.data()[i * k * n..(i + 1) * k * n],
                    &mut out[i * m * n..(i + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
            Tensor::new(vec![bt, m, n], out)
        }
        _ => Err(Error::shape(op.name(), &[sa, sb])),
    }
}

fn transpose(op: &Op, x: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    if s.len() < 2 {
        return Err(Error::shape(op.name(), &[s]));
    }
    let (m, n) = (s[s.len() - 2], s[s.len() - 1]);
    let batch: usize = s[..s.len() - 2].iter().product();
    let mut out = vec![0.0; x.numel()];
    let d = x.data();
    for b in 0..batch {
        let base = b * m * n;
        for i in 0..m {
            for j in 0..n {
                out[base + j * m + i] = d[base + i * n + j];
            }
        }
    }
    let mut shape = s.to_vec();
    let r = shape.len();
    shape.swap(r - 2, r - 1);
    Tensor::new(shape, out)
}

fn permute(op: &Op, x: &Tensor, perm: &[usize]) -> Result<Tensor> {
    let s = x.shape();
    let r = s.len();
    let mut seen = vec![false; r];
    if perm.len() != r || perm.iter().any(|&p| p >= r || std::mem::replace(&mut seen[p], true)) {
        return Err(Error::shape(op.name(), &[s, perm]));
    }
    let mut in_strides = vec![1usize; r];
    for i in (0..r.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * s[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| s[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(x.numel());
    let mut counter = vec![0usize; r];
    let d = x.data();
    for _ in 0..x.numel() {
        let src: usize = counter.iter().zip(&strides).map(|(c, s)| c * s).sum();
        out.push(d[src]);
        for ax in (0..r).rev() {
            counter[ax] += 1;
            if counter[ax] < out_shape[ax] {
                break;
            }
            counter[ax] = 0;
        }
    }
    Tensor::new(out_shape, out)
}

fn softmax_rows(x: &Tensor) -> Tensor {
    let n = x.shape().last().copied().unwrap_or(1).max(1);
    let mut out = Vec::with_capacity(x.numel());
    for row in x.data().chunks(n) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let start = out.len();
        let mut total = 0.0;
        for &v in row {
            let e = (v - max).exp();
            total += e;
            out.push(e);
        }
        for o in &mut out[start..] {
            *o /= total;
        }
    }
    Tensor::new(x.shape().to_vec(), out).expect("shape preserved")
}

fn gather(op: &Op, x: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let s = x.shape();
    if s.is_empty() {
        return Err(Error::shape(op.name(), &[s]));
    }
    let rows = s[0];
    let width: usize = s[1..].iter().product();
    let mut out = Vec::with_capacity(idx.len() * width);
    for &i in idx {
        if i >= rows {
            return Err(Error::Shape {
                op: op.name(),
                shapes: format!("row {i} out of range for {s:?}"),
            });
        }
        out.extend_from_slice(&x.data()[i * width..(i + 1) * width]);
    }
    let mut shape = s.to_vec();
    shape[0] = idx.len();
    Tensor::new(shape, out)
}

fn scatter(op: &Op, x: &Tensor, idx: &[usize], rows: usize) -> Result<Tensor> {
    let s = x.shape();
    if s.is_empty() || s[0] != idx.len() {
        return Err(Error::Shape {
            op: op.name(),
            shapes: format!("{s:?} vs {} indices", idx.len()),
        });
    }
    let width: usize = s[1..].iter().product();
    let mut out = vec![0.0; rows * width];
    for (r, &i) in idx.iter().enumerate() {
        if i >= rows {
            return Err(Error::Shape {
                op: op.name(),
                shapes: format!("row {i} out of range for {rows} rows"),
            });
        }
        let src = &x.data()[r * width..(r + 1) * width];
        for (o, v) in out[i * width..(i + 1) * width].iter_mut().zip(src) {
            *o += v;
        }
    }
    let mut shape = s.to_vec();
    shape[0] = rows;
    Tensor::new(shape, out)
}

fn cross_entropy(op: &Op, logits: &Tensor, targets: &[usize]) -> Result<Tensor> {
    let s = logits.shape();
    if s.len() != 2 || s[0] != targets.len() || s[0] == 0 {
        return Err(Error::Shape {
            op: op.name(),
            shapes: format!("{s:?} vs {} targets", targets.len()),
        });
    }
    let c = s[1];
    let mut total = 0.0;
    for (row, &t) in logits.data().chunks(c).zip(targets) {
        if t >= c {
            return Err(Error::Shape { op: op.name(), shapes: format!("target {t} >= {c} classes") });
        }
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - row[t];
    }
    Ok(Tensor::scalar(total / targets.len() as f64))
}

/// Forward value of `op` applied to `inputs`.
pub fn eval(op: &Op, inputs: &[&Tensor]) -> Result<Tensor> {
    match op {
        Op::Leaf | Op::Constant => Err(Error::Autodiff(format!("{} has no forward rule", op.name()))),
        Op::Add | Op::Sub | Op::Mul => {
            arity(op, inputs, 2)?;
            same_shape(op, inputs[0], inputs[1])?;
            Ok(match op {
                Op::Add => binary(inputs[0], inputs[1], |a, b| a + b),
                Op::Sub => binary(inputs[0], inputs[1], |a, b| a - b),
                _ => binary(inputs[0], inputs[1], |a, b| a * b),
            })
        }
        Op::Neg => {
            arity(op, inputs, 1)?;
            Ok(unary(inputs[0], |v| -v))
        }
        Op::Scale(c) => {
            arity(op, inputs, 1)?;
            Ok(unary(inputs[0], |v| v * c))
        }
        Op::AddScalar(c) => {
            arity(op, inputs, 1)?;
            Ok(unary(inputs[0], |v| v + c))
        }
        Op::ScaleBy => {
            arity(op, inputs, 2)?;
            if inputs[1].numel() != 1 {
                return Err(Error::shape(op.name(), &[inputs[0].shape(), inputs[1].shape()]));
            }
            let s = inputs[1].item();
            Ok(unary(inputs[0], |v| v * s))
        }
        Op::MatMul => {
            arity(op, inputs, 2)?;
            matmul(op, inputs[0], inputs[1])
        }
        Op::Transpose => {
            arity(op, inputs, 1)?;
            transpose(op, inputs[0])
        }
        Op::Reshape(shape) => {
            arity(op, inputs, 1)?;
            if shape.iter().product::<usize>() != inputs[0].numel() {
                return Err(Error::shape(op.name(), &[inputs[0].shape(), shape]));
            }
            Tensor::new(shape.to_vec(), inputs[0].data().to_vec())
        }
        Op::Permute(perm) => {
            arity(op, inputs, 1)?;
            permute(op, inputs[0], perm)
        }
        Op::Sum => {
            arity(op, inputs, 1)?;
            Ok(Tensor::scalar(inputs[0].data().iter().sum()))
        }
        Op::Fill(shape) => {
            arity(op, inputs, 1)?;
            if inputs[0].numel() != 1 {
                return Err(Error::shape(op.name(), &[inputs[0].shape(), shape]));
            }
            Ok(Tensor::full(shape, inputs[0].item()))
        }
        Op::SumLast => {
            arity(op, inputs, 1)?;
            let s = inputs[0].shape();
            let Some((&n, rest)) = s.split_last() else {
                return Err(Error::shape(op.name(), &[s]));
            };
            let data = inputs[0].data().chunks(n.max(1)).map(|c| c.iter().sum()).collect();
            Tensor::new(rest.to_vec(), data)
        }
        Op::ExpandLast(n) => {
            arity(op, inputs, 1)?;
            let x = inputs[0];
            let mut data = Vec::with_capacity(x.numel() * n);
            for &v in x.data() {
                data.extend(std::iter::repeat_n(v, *n));
            }
            let mut shape = x.shape().to_vec();
            shape.push(*n);
            Tensor::new(shape, data)
        }
        Op::SumLeading => {
            arity(op, inputs, 1)?;
            let s = inputs[0].shape();
            let Some((_, rest)) = s.split_first() else {
                return Err(Error::shape(op.name(), &[s]));
            };
            let width: usize = rest.iter().product();
            let mut data = vec![0.0; width];
            for row in inputs[0].data().chunks(width.max(1)) {
                for (o, v) in data.iter_mut().zip(row) {
                    *o += v;
                }
            }
            Tensor::new(rest.to_vec(), data)
        }
        Op::BroadcastLeading(rows) => {
            arity(op, inputs, 1)?;
            let x = inputs[0];
            let mut data = Vec::with_capacity(x.numel() * rows);
            for _ in 0..*rows {
                data.extend_from_slice(x.data());
            }
            let mut shape = vec![*rows];
            shape.extend_from_slice(x.shape());
            Tensor::new(shape, data)
        }
        Op::Softmax => {
            arity(op, inputs, 1)?;
            if inputs[0].rank() == 0 {
                return Err(Error::shape(op.name(), &[inputs[0].shape()]));
            }
            Ok(softmax_rows(inputs[0]))
        }
        Op::Tanh => {
            arity(op, inputs, 1)?;
            Ok(unary(inputs[0], f64::tanh))
        }
        Op::Relu => {
            arity(op, inputs, 1)?;
            Ok(unary(inputs[0], |v| if v > 0.0 { v } else { 0.0 }))
        }
        Op::Exp => {
            arity(op, inputs, 1)?;
            Ok(unary(inputs[0], f64::exp))
        }
        Op::Square => {
            arity(op, inputs, 1)?;
            Ok(unary(inputs[0], |v| v * v))
        }
        Op::Sqrt => {
            arity(op, inputs, 1)?;
            Ok(unary(inputs[0], f64::sqrt))
        }
        Op::Recip => {
            arity(op, inputs, 1)?;
            Ok(unary(inputs[0], f64::recip))
        }
        Op::Gather(idx) => {
            arity(op, inputs, 1)?;
            gather(op, inputs[0], idx)
        }
        Op::Scatter { idx, rows } => {
            arity(op, inputs, 1)?;
            scatter(op, inputs[0], idx, *rows)
        }
        Op::Concat => {
            if inputs.is_empty() {
                return Err(Error::Autodiff("concat of zero tensors".into()));
            }
            let tail = &inputs[0].shape().get(1..).unwrap_or(&[]).to_vec();
            let mut rows = 0;
            let mut data = Vec::new();
            for t in inputs {
                if t.rank() == 0 || &t.shape()[1..] != tail.as_slice() {
                    return Err(Error::shape(op.name(), &[inputs[0].shape(), t.shape()]));
                }
                rows += t.shape()[0];
                data.extend_from_slice(t.data());
            }
            let mut shape = vec![rows];
            shape.extend_from_slice(tail);
            Tensor::new(shape, data)
        }
        Op::CrossEntropy(targets) => {
            arity(op, inputs, 1)?;
            cross_entropy(op, inputs[0], targets)
        }
    }
}
