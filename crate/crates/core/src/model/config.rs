use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Reserved token ids. Ordinary tokens start at [`FIRST_TOKEN`].
pub const PAD: usize = 0;
pub const EOS: usize = 1;
pub const FIRST_TOKEN: usize = 2;

pub fn is_special(token: usize) -> bool {
    token < FIRST_TOKEN
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TaskHead {
    Classification { classes: usize },
    Regression,
}

impl TaskHead {
    pub fn outputs(self) -> usize {
        match self {
            TaskHead::Classification { classes } => classes,
            TaskHead::Regression => 1,
        }
    }

    pub fn is_classification(self) -> bool {
        matches!(self, TaskHead::Classification { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ff_dim: usize,
    pub max_seq_len: usize,
    pub head: TaskHead,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            embed_dim: 32,
            num_layers: 4,
            num_heads: 4,
            ff_dim: 64,
            max_seq_len: 32,
            head: TaskHead::Classification { classes: 2 },
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::ModelConfig(m));
        if self.embed_dim == 0 || self.num_heads == 0 || self.ff_dim == 0 || self.max_seq_len == 0 {
            return fail("dimensions must be positive".into());
        }
        if self.embed_dim % self.num_heads != 0 {
            return fail(format!(
                "embed-dim {} is not divisible by num-heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        if self.num_layers == 0 {
            return fail("num-layers must be at least 1".into());
        }
        if self.vocab_size <= FIRST_TOKEN {
            return fail(format!(
                "vocab-size {} leaves no room beyond the pad and end-of-sequence specials",
                self.vocab_size
            ));
        }
        if let TaskHead::Classification { classes } = self.head {
            if classes < 2 {
                return fail(format!("classification needs at least 2 classes, got {classes}"));
            }
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }
}
