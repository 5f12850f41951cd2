//! SGD with heavy-ball momentum and L2 weight decay.

use serde::{Deserialize, Serialize};

use super::encoder::{EncoderNet, ParamGrads};
use super::linalg::normalize_rows;
use crate::error::{DdlError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            momentum: 0.9,
            weight_decay: 5e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: SgdConfig,
    /// Momentum buffers, laid out like [`ParamGrads`].
    pub buffers: ParamGrads,
    pub iteration: u64,
}

impl OptimizerState {
    pub fn new(net: &EncoderNet, config: SgdConfig) -> Result<Self> {
        if !(config.lr > 0.0) {
            return Err(DdlError::InvalidConfig(format!("learning rate must be > 0, got {}", config.lr)));
        }
        Ok(Self {
            config,
            buffers: ParamGrads::zeros_like(net),
            iteration: 0,
        })
    }

    pub fn set_lr(&mut self, lr: f64) -> Result<()> {
        if !(lr > 0.0) {
            return Err(DdlError::InvalidConfig(format!("learning rate must be > 0, got {lr}")));
        }
        self.config.lr = lr;
        Ok(())
    }
}

/// `buf <- mu*buf + (grad + wd*param); param <- param - lr*buf`.
pub fn sgd_update(params: &mut [f64], grads: &[f64], buf: &mut [f64], config: &SgdConfig) {
    debug_assert_eq!(params.len(), grads.len());
    debug_assert_eq!(params.len(), buf.len());
    for ((p, &g), b) in params.iter_mut().zip(grads).zip(buf.iter_mut()) {
        *b = config.momentum * *b + (g + config.weight_decay * *p);
        *p -= config.lr * *b;
    }
}

/// One optimizer step over every encoder and head parameter. Head rows are
/// re-projected onto the unit sphere afterwards.
pub fn sgd_step(net: &mut EncoderNet, grads: &ParamGrads, state: &mut OptimizerState) -> Result<()> {
    let named = grads.tensors();
    if named.len() != net.tensors().len() {
        return Err(DdlError::ShapeMismatch("gradient tensor count differs from parameters".into()));
    }
    for ((name, g), (_, p)) in named.iter().zip(net.tensors()) {
        if g.len() != p.len() {
            return Err(DdlError::ShapeMismatch(format!(
                "`{name}`: gradient has {} entries, parameter {}",
                g.len(),
                p.len()
            )));
        }
        if let Some((index, &value)) = g.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(DdlError::NonFiniteGradient {
                tensor: name.clone(),
                index,
                value,
            });
        }
    }
    let config = state.config;
    for ((p, b), (_, g)) in net
        .tensors_mut()
        .into_iter()
        .zip(state.buffers.tensors_mut())
        .zip(named)
    {
        sgd_update(p, g, b, &config);
    }
    normalize_rows(&mut net.head)?;
    state.iteration += 1;
    Ok(())
}
