use std::collections::BTreeMap;
use std::f64::consts::PI;

use super::model::{Batch, MosaicModel};
use super::{MosaicError, OptimizerConfig};
use crate::autodiff::{Scalar, Tensor};

/// Linear warmup to `lr` over `warmup_iters`, then cosine decay to `min_lr`
/// at `max_iters`, constant afterwards.
pub fn learning_rate(cfg: &OptimizerConfig, step: u64) -> f64 {
    if step < cfg.warmup_iters {
        return cfg.lr * (step + 1) as f64 / cfg.warmup_iters as f64;
    }
    if step >= cfg.max_iters {
        return cfg.min_lr;
    }
    let span = (cfg.max_iters - cfg.warmup_iters).max(1) as f64;
    let progress = (step - cfg.warmup_iters) as f64 / span;
    cfg.min_lr + 0.5 * (1.0 + (PI * progress).cos()) * (cfg.lr - cfg.min_lr)
}

/// Adam with decoupled weight decay (applied to matrices only) and
/// global-norm gradient clipping.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: OptimizerConfig,
    pub step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl AdamW {
    pub fn new(config: OptimizerConfig) -> Self {
        Self {
            config,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Applies one update and returns the learning rate used.
    pub fn update<T: Scalar>(
        &mut self,
        params: &mut BTreeMap<String, Tensor<T>>,
        grads: &BTreeMap<String, Tensor<T>>,
    ) -> f64 {
        let c = &self.config;
        let lr = learning_rate(c, self.step);
        self.step += 1;
        let norm = grads.values().map(|g| g.sq_norm()).sum::<f64>().sqrt();
        let clip = if norm > c.grad_clip { c.grad_clip / norm } else { 1.0 };
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (name, p) in params.iter_mut() {
            let g = &grads[name];
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; p.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; p.len()]);
            let decay = if p.rank() >= 2 { c.weight_decay } else { 0.0 };
            for (((w, gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gi = gi.as_f64() * clip;
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                let mut wf = w.as_f64();
                wf -= lr * decay * wf;
                wf -= lr * mhat / (vhat.sqrt() + c.eps);
                *w = T::from_f64(wf);
            }
        }
        lr
    }
}

impl<T: Scalar> MosaicModel<T> {
    /// One optimization step on `batch`; returns the pre-update loss and the
    /// learning rate used.
    pub fn train_step(&mut self, opt: &mut AdamW, batch: &Batch) -> Result<(f64, f64), MosaicError> {
        let (loss, grads) = self.loss_and_grads(batch)?;
        if !loss.is_finite() {
            return Err(MosaicError::NonFiniteLoss { step: opt.step, loss });
        }
        let lr = opt.update(&mut self.params, &grads);
        Ok((loss, lr))
    }
}
