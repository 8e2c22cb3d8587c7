//! Small decoder-style transformer with causal attention.
//!
//! Exposes the token embeddings as the differentiable input and the
//! last-token output of every block as a layer representation.

mod checkpoint;
mod config;
mod forward;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{is_special, ModelConfig, TaskHead, EOS, FIRST_TOKEN, PAD};
pub use forward::{join_pair, BoundModel, ForwardTrace};

#[cfg(test)]
mod tests;
