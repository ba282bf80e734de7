//! SGD with momentum and weight decay, plus the cosine annealing schedule.

use crate::error::{Error, Result};
use crate::numgrad::net::ParamTensor;
use crate::numgrad::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must be in [0,1), got {}",
                self.momentum
            )));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config(format!(
                "weight_decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

/// Step every parameter with its matching gradient. `params` and `grads`
/// must align pairwise (same order as the forward pass bound them).
pub fn sgd_step<'a>(
    params: impl Iterator<Item = &'a mut ParamTensor>,
    grads: &[Tensor],
    cfg: &SgdConfig,
    lr: f64,
) -> Result<()> {
    let mut n = 0;
    for (p, g) in params.zip(grads.iter()) {
        p.apply_grad(g, cfg, lr)?;
        n += 1;
    }
    if n != grads.len() {
        return Err(Error::State(format!(
            "sgd_step: {} gradients but {} parameters",
            grads.len(),
            n
        )));
    }
    Ok(())
}

/// lr = 0.5 * lr0 * (1 + cos(pi * epoch / total))
pub fn cosine_lr(epoch: usize, total_epochs: usize, lr0: f64) -> f64 {
    debug_assert!(epoch <= total_epochs);
    0.5 * lr0 * (1.0 + (std::f64::consts::PI * epoch as f64 / total_epochs as f64).cos())
}
