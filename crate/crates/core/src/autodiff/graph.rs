use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use smallvec::{smallvec, SmallVec};

use super::ops::{eval, Op};
use super::tensor::Tensor;
use crate::error::{Error, Result};

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node of one [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    graph: u64,
    pub(crate) index: usize,
}

impl Var {
    pub fn node_id(self) -> usize {
        self.index
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Node {
    pub(crate) op: Op,
    pub(crate) inputs: SmallVec<[usize; 2]>,
    pub(crate) value: Tensor,
    pub(crate) requires_grad: bool,
}

/// Append-only record of one computation.
///
/// Nodes are stored in creation order, which is a topological order. When
/// gradient tracking is enabled, every new node whose inputs require gradients
/// is itself differentiable, including nodes created by [`Graph::grad`].
#[derive(Debug)]
pub struct Graph {
    id: u64,
    pub(crate) nodes: Vec<Node>,
    pub(crate) grad_enabled: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    /// Runs `f` with gradient tracking switched to `enabled`.
    pub fn with_grad<T>(&mut self, enabled: bool, f: impl FnOnce(&mut Self) -> T) -> T {
        let prev = std::mem::replace(&mut self.grad_enabled, enabled);
        let out = f(self);
        self.grad_enabled = prev;
        out
    }

    pub(crate) fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.graph != self.id || v.index >= self.nodes.len() {
            return Err(Error::Autodiff(format!(
                "node {} does not belong to this graph",
                v.index
            )));
        }
        Ok(v.index)
    }

    pub(crate) fn handle(&self, index: usize) -> Var {
        Var { graph: self.id, index }
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { op: Op::Leaf, inputs: SmallVec::new(), value, requires_grad: true });
        self.handle(self.nodes.len() - 1)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            op: Op::Constant,
            inputs: SmallVec::new(),
            value,
            requires_grad: false,
        });
        self.handle(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.index].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.index].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.index].requires_grad
    }

    pub fn op_kind(&self, v: Var) -> &Op {
        &self.nodes[v.index].op
    }

    pub(crate) fn push(&mut self, op: Op, inputs: &[Var]) -> Result<Var> {
        let mut idx: SmallVec<[usize; 2]> = SmallVec::with_capacity(inputs.len());
        for &v in inputs {
            idx.push(self.check(v)?);
        }
        let value = {
            let vals: SmallVec<[&Tensor; 4]> = idx.iter().map(|&i| &self.nodes[i].value).collect();
            eval(&op, &vals)?
        };
        let requires_grad = self.grad_enabled && idx.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node { op, inputs: idx, value, requires_grad });
        Ok(self.handle(self.nodes.len() - 1))
    }

    /// Recomputes every non-input node from the recorded leaves and constants.
    pub fn replay(&self) -> Result<Vec<Tensor>> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match node.op {
                Op::Leaf | Op::Constant => node.value.clone(),
                _ => {
                    let ins: SmallVec<[&Tensor; 4]> = node.inputs.iter().map(|&i| &values[i]).collect();
                    eval(&node.op, &ins)?
                }
            };
            values.push(v);
        }
        Ok(values)
    }

    // --- primitives -------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Mul, &[a, b])
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Neg, &[a])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.push(Op::Scale(c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.push(Op::AddScalar(c), &[a])
    }

    /// `a * s` where `s` holds a single value.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        self.push(Op::ScaleBy, &[a, s])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::MatMul, &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Transpose, &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if self.shape(a) == shape {
            return Ok(a);
        }
        self.push(Op::Reshape(SmallVec::from_slice(shape)), &[a])
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        self.push(Op::Permute(SmallVec::from_slice(perm)), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Sum, &[a])
    }

    pub fn fill(&mut self, s: Var, shape: &[usize]) -> Result<Var> {
        self.push(Op::Fill(SmallVec::from_slice(shape)), &[s])
    }

    /// Sum over the last axis.
    pub fn sum_last(&mut self, a: Var) -> Result<Var> {
        self.push(Op::SumLast, &[a])
    }

    /// Repeats every element `n` times along a new last axis.
    pub fn expand_last(&mut self, a: Var, n: usize) -> Result<Var> {
        self.push(Op::ExpandLast(n), &[a])
    }

    /// Sum over axis 0.
    pub fn sum_leading(&mut self, a: Var) -> Result<Var> {
        self.push(Op::SumLeading, &[a])
    }

    /// Stacks `rows` copies of `a` along a new axis 0.
    pub fn broadcast_leading(&mut self, a: Var, rows: usize) -> Result<Var> {
        self.push(Op::BroadcastLeading(rows), &[a])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Softmax, &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Tanh, &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Relu, &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Exp, &[a])
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Square, &[a])
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Sqrt, &[a])
    }

    pub fn recip(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Recip, &[a])
    }

    /// Selects rows of `a` along axis 0. Used for embedding lookup and
    /// last-token selection.
    pub fn gather(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        self.push(Op::Gather(Arc::from(idx)), &[a])
    }

    pub(crate) fn gather_shared(&mut self, a: Var, idx: Arc<[usize]>) -> Result<Var> {
        self.push(Op::Gather(idx), &[a])
    }

    pub fn scatter(&mut self, a: Var, idx: &[usize], rows: usize) -> Result<Var> {
        self.push(Op::Scatter { idx: Arc::from(idx), rows }, &[a])
    }

    pub(crate) fn scatter_shared(&mut self, a: Var, idx: Arc<[usize]>, rows: usize) -> Result<Var> {
        self.push(Op::Scatter { idx, rows }, &[a])
    }

    /// Concatenation along axis 0.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        self.push(Op::Concat, parts)
    }

    /// Rows `start..end` of `a`.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let idx: Vec<usize> = (start..end).collect();
        self.gather(a, &idx)
    }

    /// Mean cross-entropy of `[batch, classes]` logits against class indices.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        self.push(Op::CrossEntropy(Arc::from(targets)), &[logits])
    }

    // --- composites -------------------------------------------------------

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel().max(1) as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    /// Mean over the last axis.
    pub fn mean_last(&mut self, a: Var) -> Result<Var> {
        let n = *self.shape(a).last().unwrap_or(&1) as f64;
        let s = self.sum_last(a)?;
        self.scale(s, 1.0 / n)
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let p = self.mul(a, b)?;
        self.sum(p)
    }

    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let d = self.sub(pred, target)?;
        let sq = self.square(d)?;
        self.mean(sq)
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
        let x2 = self.square(x)?;
        let x3 = self.mul(x2, x)?;
        let cubic = self.scale(x3, 0.044715)?;
        let inner = self.add(x, cubic)?;
        let inner = self.scale(inner, C)?;
        let t = self.tanh(inner)?;
        let t1 = self.add_scalar(t, 1.0)?;
        let half = self.scale(x, 0.5)?;
        self.mul(half, t1)
    }

    /// `x + b` with `b` repeated over every row of `x`.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let rows = self.shape(x)[0];
        let bb = self.broadcast_leading(b, rows)?;
        self.add(x, bb)
    }

    /// `x W + b` for `x: [rows, in]`, `W: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row_bias(y, b)
    }

    /// Layer normalization over the last axis of a `[rows, width]` tensor.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let width = *self.shape(x).last().ok_or_else(|| Error::shape("layer-norm", &[&[]]))?;
        let mu = self.mean_last(x)?;
        let mu = self.expand_last(mu, width)?;
        let xc = self.sub(x, mu)?;
        let sq = self.square(xc)?;
        let var = self.mean_last(sq)?;
        let var = self.add_scalar(var, eps)?;
        let sd = self.sqrt(var)?;
        let inv = self.recip(sd)?;
        let inv = self.expand_last(inv, width)?;
        let xn = self.mul(xc, inv)?;
        let rows = self.shape(x)[0];
        let g = self.broadcast_leading(gamma, rows)?;
        let y = self.mul(xn, g)?;
        self.add_row_bias(y, beta)
    }

    pub(crate) fn scalar_one_like(&mut self, v: Var) -> Var {
        let shape: SmallVec<[usize; 4]> = smallvec![];
        let shape = if self.value(v).rank() == 0 { shape } else { SmallVec::from_slice(self.shape(v)) };
        self.constant(Tensor::full(&shape, 1.0))
    }
}
