//! Parameter storage and the on-disk checkpoint format.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic    8 bytes   "JHCKPT\0\0"
//! version  u32       CHECKPOINT_VERSION
//! hlen     u64       length of the JSON header in bytes
//! header   hlen      {"config": ModelConfig, "step": u64,
//!                     "params": [{"name": str, "shape": [usize]}...]}
//! blocks   f64 * n   parameter values in header order, row-major
//! ```

use std::io::{Read, Write};
use std::path::Path;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rng;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"JHCKPT\0\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: Vec<(String, Tensor)>,
    pub step: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    step: u64,
    params: Vec<ParamHeader>,
}

#[derive(Serialize, Deserialize)]
struct ParamHeader {
    name: String,
    shape: Vec<usize>,
}

enum Init {
    Normal(f64),
    Ones,
    Zeros,
}

/// Names, shapes and initializers of every parameter, in canonical order.
fn layout(c: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let d = c.embed_dim;
    let lin = |fan_in: usize| Init::Normal(1.0 / (fan_in as f64).sqrt());
    let mut out = vec![
        ("tok_emb".to_string(), vec![c.vocab_size, d], Init::Normal(1.0)),
        ("pos_emb".to_string(), vec![c.max_seq_len, d], Init::Normal(0.5)),
    ];
    for l in 0..c.num_layers {
        let p = |s: &str| format!("layers.{l}.{s}");
        out.extend([
            (p("ln1.gamma"), vec![d], Init::Ones),
            (p("ln1.beta"), vec![d], Init::Zeros),
            (p("attn.wq"), vec![d, d], lin(d)),
            (p("attn.bq"), vec![d], Init::Zeros),
            (p("attn.wk"), vec![d, d], lin(d)),
            (p("attn.bk"), vec![d], Init::Zeros),
            (p("attn.wv"), vec![d, d], lin(d)),
            (p("attn.bv"), vec![d], Init::Zeros),
            (p("attn.wo"), vec![d, d], lin(d)),
            (p("attn.bo"), vec![d], Init::Zeros),
            (p("ln2.gamma"), vec![d], Init::Ones),
            (p("ln2.beta"), vec![d], Init::Zeros),
            (p("ffn.w1"), vec![d, c.ff_dim], lin(d)),
            (p("ffn.b1"), vec![c.ff_dim], Init::Zeros),
            (p("ffn.w2"), vec![c.ff_dim, d], lin(c.ff_dim)),
            (p("ffn.b2"), vec![d], Init::Zeros),
        ]);
    }
    out.extend([
        ("ln_f.gamma".to_string(), vec![d], Init::Ones),
        ("ln_f.beta".to_string(), vec![d], Init::Zeros),
        ("head.w".to_string(), vec![d, c.head.outputs()], lin(d)),
        ("head.b".to_string(), vec![c.head.outputs()], Init::Zeros),
    ]);
    out
}

/// Parameters per transformer block, in `layout` order.
pub(crate) const PARAMS_PER_LAYER: usize = 16;

impl Checkpoint {
    /// Fresh parameters drawn from seeded scaled-normal distributions.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut params = Vec::new();
        for (i, (name, shape, init)) in layout(config).into_iter().enumerate() {
            let n: usize = shape.iter().product();
            let data = match init {
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::Normal(std) => {
                    let mut r = rng::stream(config.seed, &[rng::tag::INIT, i as u64]);
                    let dist = Normal::new(0.0, std).expect("positive std");
                    (0..n).map(|_| dist.sample(&mut r)).collect()
                }
            };
            params.push((name, Tensor::new(shape, data)?));
        }
        Ok(Self { config: config.clone(), params, step: 0 })
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let header = Header {
            config: self.config.clone(),
            step: self.step,
            params: self
                .params
                .iter()
                .map(|(name, t)| ParamHeader { name: name.clone(), shape: t.shape().to_vec() })
                .collect(),
        };
        let header = serde_json::to_vec(&header)?;
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(header.len() as u64).to_le_bytes())?;
        w.write_all(&header)?;
        let mut buf = Vec::with_capacity(self.num_parameters() * 8);
        for (_, t) in &self.params {
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic; not a checkpoint file".into()));
        }
        let mut u32b = [0u8; 4];
        r.read_exact(&mut u32b)?;
        let version = u32::from_le_bytes(u32b);
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {version}, expected {CHECKPOINT_VERSION}"
            )));
        }
        let mut u64b = [0u8; 8];
        r.read_exact(&mut u64b)?;
        let hlen = u64::from_le_bytes(u64b) as usize;
        let mut header = vec![0u8; hlen];
        r.read_exact(&mut header)?;
        let header: Header = serde_json::from_slice(&header)?;
        header.config.validate()?;
        let mut params = Vec::with_capacity(header.params.len());
        for p in header.params {
            let n: usize = p.shape.iter().product();
            let mut raw = vec![0u8; n * 8];
            r.read_exact(&mut raw)
                .map_err(|e| Error::Checkpoint(format!("truncated block {}: {e}", p.name)))?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            params.push((p.name, Tensor::new(p.shape, data)?));
        }
        let expected = layout(&header.config);
        if expected.len() != params.len()
            || expected.iter().zip(&params).any(|((n, s, _), (pn, t))| n != pn || s.as_slice() != t.shape())
        {
            return Err(Error::Checkpoint("parameter blocks do not match the config".into()));
        }
        Ok(Self { config: header.config, params, step: header.step })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f))
    }
}
