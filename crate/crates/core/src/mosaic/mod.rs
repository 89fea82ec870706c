//! A small Memory Mosaics language model.
//!
//! Every block runs two memories in parallel on the residual stream:
//!
//! * a contextual memory: leaky-averaged unit-norm keys, one-step look-ahead
//!   values and diagonal-excluded causal attention, and
//! * a persistent memory: attention of the same keys over learned slots.
//!
//! There is no positional encoding and no feed-forward network.

mod checkpoint;
mod memory;
mod model;
mod optim;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::AutodiffError;
use crate::transforms::{Transform, TransformError, TransformSpec};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use memory::{compute_keys, compute_values, contextual_forward, persistent_forward};
pub use model::{Batch, LayerTrace, MosaicModel};
pub use optim::{learning_rate, AdamW};

#[derive(Debug, Error)]
pub enum MosaicError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("token id {token} is outside the vocabulary of {vocab}")]
    InvalidToken { token: usize, vocab: usize },
    #[error("non-finite loss {loss} at step {step}")]
    NonFiniteLoss { step: u64, loss: f64 },
    #[error("batch: {0}")]
    Batch(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("not a checkpoint (bad magic bytes)")]
    BadMagic,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Transform(#[from] TransformError),
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.95
}
fn default_clip() -> f64 {
    1.0
}
fn default_eps() -> f64 {
    1e-8
}
fn default_lambda_init() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub min_lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "default_clip")]
    pub grad_clip: f64,
    #[serde(default)]
    pub warmup_iters: u64,
    pub max_iters: u64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            min_lr: 1e-4,
            beta1: 0.9,
            beta2: 0.95,
            weight_decay: 0.1,
            grad_clip: 1.0,
            warmup_iters: 100,
            max_iters: 2000,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MosaicConfig {
    pub depth: usize,
    pub d_model: usize,
    pub heads: usize,
    pub vocab: usize,
    /// Training sequence length; evaluation may use longer sequences.
    pub seq_len: usize,
    pub persistent_slots: usize,
    pub transform: Transform,
    /// Attention temperature; `None` picks the transform's default for the
    /// head dimension.
    #[serde(default)]
    pub gamma: Option<f64>,
    /// Initial value of the unsquashed leaky-average and look-ahead
    /// coefficients.
    #[serde(default = "default_lambda_init")]
    pub lambda_init: f64,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub seed: u64,
}

impl MosaicConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads.max(1)
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
            .unwrap_or_else(|| self.transform.default_gamma(self.head_dim()))
    }

    pub fn transform_spec(&self) -> TransformSpec {
        TransformSpec::new(self.transform.clone(), self.gamma())
    }

    pub fn validate(&self) -> Result<(), MosaicError> {
        let bad = |m: &str| Err(MosaicError::Config(m.to_string()));
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return bad("d_model must be a positive multiple of heads");
        }
        if self.vocab == 0 {
            return bad("vocab must be positive");
        }
        if self.seq_len < 2 {
            return bad("seq_len must be at least 2");
        }
        if self.persistent_slots == 0 {
            return bad("persistent_slots must be positive");
        }
        if !(0.0..1.0).contains(&self.lambda_init) {
            return bad("lambda_init must lie in [0, 1)");
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0 && o.min_lr >= 0.0 && o.min_lr <= o.lr) {
            return bad("need 0 <= min_lr <= lr and lr > 0");
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        if !(o.grad_clip > 0.0) || o.weight_decay < 0.0 || !(o.eps > 0.0) {
            return bad("grad_clip and eps must be positive, weight_decay non-negative");
        }
        self.transform_spec().validate()?;
        Ok(())
    }
}
