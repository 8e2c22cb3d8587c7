use std::sync::Arc;

use super::checkpoint::{Checkpoint, PARAMS_PER_LAYER};
use super::config::{ModelConfig, EOS, PAD};
use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;
const MASKED: f64 = -1e9;

/// One forward pass over a batch.
///
/// `input` holds the token embeddings of every position, `[batch * seq_len,
/// embed_dim]`, instance-major. Each of the `layers` is `[batch, embed_dim]`:
/// the output of one transformer block at the last real token of each
/// instance. Instances never interact, so per-instance derivatives can be
/// read off a single backward pass over the batch.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub input: Var,
    pub batch: usize,
    pub seq_len: usize,
    pub lengths: Vec<usize>,
    pub layers: Vec<Var>,
    pub logits: Var,
    pub probs: Option<Var>,
}

impl ForwardTrace {
    /// Trace over an arbitrary differentiable function, for tests and oracles.
    /// `input` must hold `batch` equally sized instance blocks along axis 0.
    pub fn from_parts(input: Var, batch: usize, layers: Vec<Var>, logits: Var) -> Self {
        Self { input, batch, seq_len: 0, lengths: Vec::new(), layers, logits, probs: None }
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Representation of block `k` (0-based).
    pub fn layer(&self, k: usize) -> Result<Var> {
        self.layers.get(k).copied().ok_or_else(|| {
            Error::Estimator(format!("layer index {k} out of range for {} layers", self.layers.len()))
        })
    }
}

/// Checkpoint parameters attached to a graph.
#[derive(Debug, Clone)]
pub struct BoundModel {
    pub config: ModelConfig,
    pub vars: Vec<Var>,
    pub trainable: bool,
}

impl Checkpoint {
    /// Attaches parameters as leaves (`trainable`) or constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundModel {
        let vars = self
            .params
            .iter()
            .map(|(_, t)| if trainable { g.leaf(t.clone()) } else { g.constant(t.clone()) })
            .collect();
        BoundModel { config: self.config.clone(), vars, trainable }
    }

    /// Single-sequence forward pass with frozen parameters; the trace input is
    /// a leaf.
    pub fn forward(&self, g: &mut Graph, tokens: &[usize]) -> Result<ForwardTrace> {
        self.bind(g, false).forward(g, &[tokens.to_vec()], None)
    }

    /// Forward pass over `a ⊕ EOS ⊕ b`.
    pub fn pair_forward(&self, g: &mut Graph, a: &[usize], b: &[usize]) -> Result<ForwardTrace> {
        let joined = join_pair(a, b);
        if joined.len() > self.config.max_seq_len {
            return Err(Error::SequenceTooLong { len: joined.len(), max: self.config.max_seq_len });
        }
        self.forward(g, &joined)
    }

    pub fn forward_batch(&self, g: &mut Graph, batch: &[Vec<usize>], noise: Option<&Tensor>) -> Result<ForwardTrace> {
        self.bind(g, false).forward(g, batch, noise)
    }
}

/// `a ⊕ EOS ⊕ b`.
pub fn join_pair(a: &[usize], b: &[usize]) -> Vec<usize> {
    let mut out = Vec::with_capacity(a.len() + b.len() + 1);
    out.extend_from_slice(a);
    out.push(EOS);
    out.extend_from_slice(b);
    out
}

struct LayerVars<'a>(&'a [Var]);

impl LayerVars<'_> {
    fn get(&self, i: usize) -> Var {
        self.0[i]
    }
}

impl BoundModel {
    pub fn param_vars(&self) -> &[Var] {
        &self.vars
    }

    /// Shapes a batch into padded rows and validates every token.
    fn pad_batch(&self, batch: &[Vec<usize>]) -> Result<(Vec<usize>, Vec<usize>, usize)> {
        let c = &self.config;
        if batch.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        let mut lengths = Vec::with_capacity(batch.len());
        for seq in batch {
            if seq.is_empty() {
                return Err(Error::Data("empty token sequence".into()));
            }
            if seq.len() > c.max_seq_len {
                return Err(Error::SequenceTooLong { len: seq.len(), max: c.max_seq_len });
            }
            if let Some(&bad) = seq.iter().find(|&&t| t >= c.vocab_size) {
                return Err(Error::OutOfVocab { token: bad, vocab: c.vocab_size });
            }
            lengths.push(seq.len());
        }
        let t = *lengths.iter().max().expect("non-empty");
        let mut ids = Vec::with_capacity(batch.len() * t);
        for seq in batch {
            ids.extend_from_slice(seq);
            ids.extend(std::iter::repeat_n(PAD, t - seq.len()));
        }
        Ok((ids, lengths, t))
    }

    fn attention_mask(&self, lengths: &[usize], t: usize) -> Tensor {
        let heads = self.config.num_heads;
        let mut data = Vec::with_capacity(lengths.len() * heads * t * t);
        for &len in lengths {
            for _ in 0..heads {
                for q in 0..t {
                    for k in 0..t {
                        data.push(if k > q || k >= len { MASKED } else { 0.0 });
                    }
                }
            }
        }
        Tensor::new(vec![lengths.len() * heads, t, t], data).expect("mask shape")
    }

    /// Batched forward pass. `noise`, when given, is added to the token
    /// embeddings (shape `[batch * seq_len, embed_dim]`).
    pub fn forward(&self, g: &mut Graph, batch: &[Vec<usize>], noise: Option<&Tensor>) -> Result<ForwardTrace> {
        let c = &self.config;
        let (ids, lengths, t) = self.pad_batch(batch)?;
        let b = batch.len();
        let d = c.embed_dim;
        let rows = b * t;
        let ids: Arc<[usize]> = ids.into();

        if let Some(n) = noise {
            if n.shape() != [rows, d] {
                return Err(Error::shape("perturbation", &[n.shape(), &[rows, d]]));
            }
        }
        let tok_emb = self.vars[0];
        let input = if self.trainable {
            let x = g.gather_shared(tok_emb, ids.clone())?;
            match noise {
                Some(n) => {
                    let n = g.constant(n.clone());
                    g.add(x, n)?
                }
                None => x,
            }
        } else {
            let table = g.value(tok_emb).clone();
            let mut x = gather_rows(&table, &ids);
            if let Some(n) = noise {
                for (v, e) in x.data_mut().iter_mut().zip(n.data()) {
                    *v += e;
                }
            }
            g.leaf(x)
        };

        let positions: Vec<usize> = (0..b).flat_map(|_| 0..t).collect();
        let pos = g.gather(self.vars[1], &positions)?;
        let mut h = g.add(input, pos)?;

        let mask = g.constant(self.attention_mask(&lengths, t));
        let last: Vec<usize> = lengths.iter().enumerate().map(|(i, &len)| i * t + len - 1).collect();
        let last: Arc<[usize]> = last.into();

        let mut layers = Vec::with_capacity(c.num_layers);
        for l in 0..c.num_layers {
            let base = 2 + l * PARAMS_PER_LAYER;
            let p = LayerVars(&self.vars[base..base + PARAMS_PER_LAYER]);
            let a = g.layer_norm(h, p.get(0), p.get(1), LN_EPS)?;
            let a = self.attention(g, a, &p, mask, b, t)?;
            h = g.add(h, a)?;
            let f = g.layer_norm(h, p.get(10), p.get(11), LN_EPS)?;
            let f = g.linear(f, p.get(12), p.get(13))?;
            let f = g.gelu(f)?;
            let f = g.linear(f, p.get(14), p.get(15))?;
            h = g.add(h, f)?;
            layers.push(g.gather_shared(h, last.clone())?);
        }

        let tail = 2 + c.num_layers * PARAMS_PER_LAYER;
        let zk = *layers.last().expect("at least one layer");
        let zf = g.layer_norm(zk, self.vars[tail], self.vars[tail + 1], LN_EPS)?;
        let logits = g.linear(zf, self.vars[tail + 2], self.vars[tail + 3])?;
        let probs = if c.head.is_classification() { Some(g.softmax(logits)?) } else { None };

        Ok(ForwardTrace { input, batch: b, seq_len: t, lengths, layers, logits, probs })
    }

    fn attention(&self, g: &mut Graph, x: Var, p: &LayerVars, mask: Var, b: usize, t: usize) -> Result<Var> {
        let heads = self.config.num_heads;
        let dh = self.config.head_dim();
        let d = self.config.embed_dim;
        let split = |g: &mut Graph, v: Var| -> Result<Var> {
            let v = g.reshape(v, &[b, t, heads, dh])?;
            let v = g.permute(v, &[0, 2, 1, 3])?;
            g.reshape(v, &[b * heads, t, dh])
        };
        let q = g.linear(x, p.get(2), p.get(3))?;
        let q = split(g, q)?;
        let k = g.linear(x, p.get(4), p.get(5))?;
        let k = split(g, k)?;
        let v = g.linear(x, p.get(6), p.get(7))?;
        let v = split(g, v)?;

        let kt = g.transpose(k)?;
        let scores = g.matmul(q, kt)?;
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt())?;
        let scores = g.add(scores, mask)?;
        let att = g.softmax(scores)?;
        let o = g.matmul(att, v)?;
        let o = g.reshape(o, &[b, heads, t, dh])?;
        let o = g.permute(o, &[0, 2, 1, 3])?;
        let o = g.reshape(o, &[b * t, d])?;
        g.linear(o, p.get(8), p.get(9))
    }
}

fn gather_rows(table: &Tensor, ids: &[usize]) -> Tensor {
    let d = table.shape()[1];
    let mut data = Vec::with_capacity(ids.len() * d);
    for &i in ids {
        data.extend_from_slice(&table.data()[i * d..(i + 1) * d]);
    }
    Tensor::new(vec![ids.len(), d], data).expect("gather shape")
}
