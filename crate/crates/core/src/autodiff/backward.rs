//! Reverse sweep. Every derivative rule below is written in graph primitives,
//! so with tracking enabled the sweep records a graph that can be
//! differentiated again (reverse-over-reverse).

use std::collections::HashSet;

use smallvec::{smallvec, SmallVec};

use super::graph::{Graph, Var};
use super::ops::Op;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Gradients of one scalar output with respect to a set of target nodes.
#[derive(Debug, Clone)]
pub struct GradientMap {
    entries: Vec<(Var, Tensor, Option<Var>)>,
    unreachable: Vec<Var>,
}

impl GradientMap {
    pub fn get(&self, leaf: Var) -> Option<&Tensor> {
        self.entries.iter().find(|(l, _, _)| *l == leaf).map(|(_, g, _)| g)
    }

    /// Recorded gradient node, present only when the sweep was recorded.
    pub fn node(&self, leaf: Var) -> Option<Var> {
        self.entries.iter().find(|(l, _, _)| *l == leaf).and_then(|(_, _, n)| *n)
    }

    /// Targets the output does not depend on; their gradients are zero.
    pub fn unreachable(&self) -> &[Var] {
        &self.unreachable
    }

    pub fn has_warning(&self) -> bool {
        !self.unreachable.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (Var, &Tensor)> {
        self.entries.iter().map(|(l, g, _)| (*l, g))
    }

    pub fn into_tensors(self) -> Vec<Tensor> {
        self.entries.into_iter().map(|(_, g, _)| g).collect()
    }
}

type Grads = SmallVec<[Option<Var>; 2]>;

impl Graph {
    /// Gradients of the scalar `output` with respect to `targets`.
    ///
    /// With `record` set, the sweep is recorded into the graph and the
    /// returned map exposes gradient nodes that are differentiable again.
    /// Otherwise the intermediate nodes are discarded after the sweep.
    pub fn backward(&mut self, output: Var, targets: &[Var], record: bool) -> Result<GradientMap> {
        let mark = self.len();
        let (vars, unreachable) = self.with_grad(record, |g| g.sweep(output, targets))?;
        let entries = targets
            .iter()
            .zip(&vars)
            .map(|(&t, &v)| (t, self.value(v).clone(), record.then_some(v)))
            .collect();
        if !record {
            self.truncate(mark);
        }
        Ok(GradientMap { entries, unreachable })
    }

    /// Recorded gradients of `output` with respect to `targets`.
    pub fn grad(&mut self, output: Var, targets: &[Var]) -> Result<Vec<Var>> {
        Ok(self.with_grad(true, |g| g.sweep(output, targets))?.0)
    }

    /// Vector-Jacobian product `vᵀ ∂z/∂x`, recorded.
    pub fn vjp(&mut self, z: Var, v: Var, x: Var) -> Result<Var> {
        if self.shape(z) != self.shape(v) {
            return Err(Error::shape("vjp", &[self.shape(z), self.shape(v)]));
        }
        let s = self.dot(z, v)?;
        Ok(self.grad(s, &[x])?[0])
    }

    fn sweep(&mut self, output: Var, targets: &[Var]) -> Result<(Vec<Var>, Vec<Var>)> {
        let out = output.index;
        if self.value(output).numel() != 1 {
            return Err(Error::Autodiff(format!(
                "backward needs a scalar output, got shape {:?}",
                self.shape(output)
            )));
        }
        // Ancestors of the output in topological order. Work is proportional
        // to this subgraph, not to everything recorded so far.
        let mut anc = vec![out];
        let mut seen = HashSet::from([out]);
        let mut next = 0;
        while next < anc.len() {
            let i = anc[next];
            next += 1;
            for &j in &self.nodes[i].inputs {
                if seen.insert(j) {
                    anc.push(j);
                }
            }
        }
        anc.sort_unstable();
        let pos = |i: usize| anc.binary_search(&i).ok();

        let n = anc.len();
        let mut dep = vec![false; n];
        for t in targets {
            if let Some(l) = pos(t.index) {
                dep[l] = true;
            }
        }
        for l in 0..n {
            if !dep[l] && self.nodes[anc[l]].inputs.iter().any(|&j| pos(j).is_some_and(|p| dep[p])) {
                dep[l] = true;
            }
        }

        let mut adj: Vec<Option<Var>> = vec![None; n];
        if dep[n - 1] {
            adj[n - 1] = Some(self.scalar_one_like(output));
        }
        for l in (0..n).rev() {
            if !dep[l] {
                continue;
            }
            let Some(a) = adj[l] else { continue };
            let i = anc[l];
            let node = &self.nodes[i];
            if node.inputs.is_empty() {
                continue;
            }
            let op = node.op.clone();
            let inputs = node.inputs.clone();
            let locals: SmallVec<[usize; 4]> = inputs.iter().map(|&j| pos(j).expect("ancestor")).collect();
            let needs: SmallVec<[bool; 4]> = locals.iter().map(|&p| dep[p]).collect();
            if !needs.iter().any(|&b| b) {
                continue;
            }
            let this = self.handle(i);
            let grads = self.vjp_rule(&op, this, &inputs, a, &needs)?;
            for ((&j, g), &need) in locals.iter().zip(grads).zip(&needs) {
                let Some(g) = g.filter(|_| need) else { continue };
                adj[j] = Some(match adj[j] {
                    Some(prev) => self.add(prev, g)?,
                    None => g,
                });
            }
        }

        let mut grads = Vec::with_capacity(targets.len());
        let mut unreachable = Vec::new();
        for &t in targets {
            match pos(t.index).and_then(|l| adj[l]) {
                Some(g) => grads.push(g),
                None => {
                    unreachable.push(t);
                    let z = Tensor::zeros(self.shape(t));
                    grads.push(self.constant(z));
                }
            }
        }
        if !unreachable.is_empty() {
            log::debug!("backward: {} target(s) unreachable from output", unreachable.len());
        }
        Ok((grads, unreachable))
    }

    fn vjp_rule(&mut self, op: &Op, y: Var, inputs: &[usize], dy: Var, needs: &[bool]) -> Result<Grads> {
        let x: SmallVec<[Var; 2]> = inputs.iter().map(|&i| self.handle(i)).collect();
        let g: Grads = match op {
            Op::Leaf | Op::Constant => smallvec![],
            Op::Add => smallvec![Some(dy), Some(dy)],
            Op::Sub => {
                let db = if needs[1] { Some(self.neg(dy)?) } else { None };
                smallvec![Some(dy), db]
            }
            Op::Mul => {
                let da = if needs[0] { Some(self.mul(dy, x[1])?) } else { None };
                let db = if needs[1] { Some(self.mul(dy, x[0])?) } else { None };
                smallvec![da, db]
            }
            Op::Neg => smallvec![Some(self.neg(dy)?)],
            Op::Scale(c) => smallvec![Some(self.scale(dy, *c)?)],
            Op::AddScalar(_) => smallvec![Some(dy)],
            Op::ScaleBy => {
                let da = if needs[0] { Some(self.scale_by(dy, x[1])?) } else { None };
                let ds = if needs[1] {
                    let p = self.mul(dy, x[0])?;
                    let s = self.sum(p)?;
                    let shape = self.shape(x[1]).to_vec();
                    Some(self.reshape(s, &shape)?)
                } else {
                    None
                };
                smallvec![da, ds]
            }
            Op::MatMul => {
                let da = if needs[0] {
                    let bt = self.transpose(x[1])?;
                    Some(self.matmul(dy, bt)?)
                } else {
                    None
                };
                let db = if needs[1] {
                    let at = self.transpose(x[0])?;
                    Some(self.matmul(at, dy)?)
                } else {
                    None
                };
                smallvec![da, db]
            }
            Op::Transpose => smallvec![Some(self.transpose(dy)?)],
            Op::Reshape(_) => {
                let shape = self.shape(x[0]).to_vec();
                smallvec![Some(self.reshape(dy, &shape)?)]
            }
            Op::Permute(perm) => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                smallvec![Some(self.permute(dy, &inv)?)]
            }
            Op::Sum => {
                let shape = self.shape(x[0]).to_vec();
                smallvec![Some(self.fill(dy, &shape)?)]
            }
            Op::Fill(_) => {
                let s = self.sum(dy)?;
                let shape = self.shape(x[0]).to_vec();
                smallvec![Some(self.reshape(s, &shape)?)]
            }
            Op::SumLast => {
                let n = *self.shape(x[0]).last().expect("rank >= 1");
                smallvec![Some(self.expand_last(dy, n)?)]
            }
            Op::ExpandLast(_) => smallvec![Some(self.sum_last(dy)?)],
            Op::SumLeading => {
                let rows = self.shape(x[0])[0];
                smallvec![Some(self.broadcast_leading(dy, rows)?)]
            }
            Op::BroadcastLeading(_) => smallvec![Some(self.sum_leading(dy)?)],
            Op::Softmax => {
                // dx = y * (dy - sum(dy * y))
                let n = *self.shape(y).last().expect("rank >= 1");
                let p = self.mul(dy, y)?;
                let s = self.sum_last(p)?;
                let s = self.expand_last(s, n)?;
                let d = self.sub(dy, s)?;
                smallvec![Some(self.mul(y, d)?)]
            }
            Op::Tanh => {
                let y2 = self.square(y)?;
                let one_minus = self.neg(y2)?;
                let one_minus = self.add_scalar(one_minus, 1.0)?;
                smallvec![Some(self.mul(dy, one_minus)?)]
            }
            Op::Relu => {
                let mask: Vec<f64> =
                    self.value(x[0]).data().iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect();
                let mask = Tensor::new(self.shape(x[0]).to_vec(), mask)?;
                let m = self.constant(mask);
                smallvec![Some(self.mul(dy, m)?)]
            }
            Op::Exp => smallvec![Some(self.mul(dy, y)?)],
            Op::Square => {
                let two_x = self.scale(x[0], 2.0)?;
                smallvec![Some(self.mul(dy, two_x)?)]
            }
            Op::Sqrt => {
                let r = self.recip(y)?;
                let r = self.scale(r, 0.5)?;
                smallvec![Some(self.mul(dy, r)?)]
            }
            Op::Recip => {
                let y2 = self.square(y)?;
                let p = self.mul(dy, y2)?;
                smallvec![Some(self.neg(p)?)]
            }
            Op::Gather(idx) => {
                let rows = self.shape(x[0])[0];
                smallvec![Some(self.scatter_shared(dy, idx.clone(), rows)?)]
            }
            Op::Scatter { idx, .. } => smallvec![Some(self.gather_shared(dy, idx.clone())?)],
            Op::Concat => {
                let mut out = Grads::new();
                let mut start = 0;
                for (k, &xi) in x.iter().enumerate() {
                    let rows = self.shape(xi)[0];
                    out.push(if needs[k] { Some(self.slice_rows(dy, start, start + rows)?) } else { None });
                    start += rows;
                }
                out
            }
            Op::CrossEntropy(targets) => {
                let shape = self.shape(x[0]).to_vec();
                let (b, c) = (shape[0], shape[1]);
                let mut onehot = vec![0.0; b * c];
                for (r, &t) in targets.iter().enumerate() {
                    onehot[r * c + t] = 1.0;
                }
                let onehot = self.constant(Tensor::new(shape, onehot)?);
                let p = self.softmax(x[0])?;
                let d = self.sub(p, onehot)?;
                let d = self.scale(d, 1.0 / b as f64)?;
                smallvec![Some(self.scale_by(d, dy)?)]
            }
        };
        Ok(g)
    }
}
