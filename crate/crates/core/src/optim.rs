//! Plain stochastic gradient descent with L2 weight decay.

use crate::error::{Error, Result};
use crate::params::ParamStore;

/// Learning rate and weight decay. Defaults are `0.001` and `0.00005`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    learning_rate: f64,
    weight_decay: f64,
}

impl SgdConfig {
    pub const DEFAULT_LEARNING_RATE: f64 = 0.001;
    pub const DEFAULT_WEIGHT_DECAY: f64 = 0.00005;

    /// `learning_rate` must be positive and `weight_decay` non-negative.
    pub fn new(learning_rate: f64, weight_decay: f64) -> Result<Self> {
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {learning_rate}"
            )));
        }
        if !(weight_decay >= 0.0 && weight_decay.is_finite()) {
            return Err(Error::Config(format!(
                "weight decay must be non-negative, got {weight_decay}"
            )));
        }
        Ok(Self {
            learning_rate,
            weight_decay,
        })
    }

    /// Same as [`SgdConfig::new`] but admits a zero learning rate, which turns
    /// every step into the identity.
    pub fn frozen_allowed(learning_rate: f64, weight_decay: f64) -> Result<Self> {
        if learning_rate == 0.0 {
            let mut cfg = Self::new(1.0, weight_decay)?;
            cfg.learning_rate = 0.0;
            return Ok(cfg);
        }
        Self::new(learning_rate, weight_decay)
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    pub fn weight_decay(&self) -> f64 {
        self.weight_decay
    }
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            learning_rate: Self::DEFAULT_LEARNING_RATE,
            weight_decay: Self::DEFAULT_WEIGHT_DECAY,
        }
    }
}

/// `p <- p - lr * (grad + weight_decay * p)` for every parameter, then clears
/// the gradient buffers.
///
/// Every parameter must carry a gradient; the adjacency matrix is updated by
/// exactly this rule like everything else.
pub fn sgd_step(params: &mut ParamStore, cfg: &SgdConfig) -> Result<()> {
    if let Some(id) = params.ids().find(|&id| params.get(id).grad().is_none()) {
        return Err(Error::State(format!(
            "parameter {} has no gradient",
            params.name(id)
        )));
    }
    let (lr, wd) = (cfg.learning_rate, cfg.weight_decay);
    if lr != 0.0 {
        for id in params.ids().collect::<Vec<_>>() {
            let t = params.get_mut(id);
            let grad = t.grad().expect("checked above").to_vec();
            t.data_mut()
                .iter_mut()
                .zip(grad)
                .for_each(|(p, g)| *p -= lr * (g + wd * *p));
        }
    }
    params.clear_grads();
    Ok(())
}
