use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::nn::network::{Network, ParamKind};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SgdConfig {
    pub momentum: f64,
    pub weight_decay_weights: f64,
    pub weight_decay_biases: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            momentum: 0.9,
            weight_decay_weights: 1e-4,
            weight_decay_biases: 1e-4,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.momentum) {
            return config_err(format!("momentum must lie in [0,1), got {}", self.momentum));
        }
        if self.weight_decay_weights < 0.0 || self.weight_decay_biases < 0.0 {
            return config_err("weight decay must be nonnegative");
        }
        Ok(())
    }

    fn decay_for(&self, kind: ParamKind) -> f64 {
        match kind {
            ParamKind::Weight => self.weight_decay_weights,
            ParamKind::Bias => self.weight_decay_biases,
        }
    }
}

/// Momentum buffers, one per network parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub config: SgdConfig,
    pub learning_rate: f64,
    pub momentum_buffers: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(net: &Network, config: SgdConfig, learning_rate: f64) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            learning_rate,
            momentum_buffers: net
                .params
                .iter()
                .map(|p| Tensor::zeros(p.value.shape()))
                .collect(),
        })
    }

    /// `v <- mu v + g + decay * theta; theta <- theta - lr v`, with the
    /// decay strength picked per parameter class.
    pub fn step(&mut self, net: &mut Network, grads: &[Tensor]) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return config_err(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        if grads.len() != net.params.len() {
            return config_err(format!(
                "{} gradients supplied for {} parameters",
                grads.len(),
                net.params.len()
            ));
        }
        for (p, g) in net.params.iter().zip(grads) {
            if p.value.shape() != g.shape() {
                return Err(Error::ShapeMismatch {
                    op: "sgd_step",
                    lhs: p.value.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
        }
        let mu = self.config.momentum;
        let lr = self.learning_rate;
        for ((p, g), v) in net
            .params
            .iter_mut()
            .zip(grads)
            .zip(self.momentum_buffers.iter_mut())
        {
            let decay = self.config.decay_for(p.kind);
            let theta = p.value.data_mut();
            for ((t, &gi), vi) in theta.iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vi = mu * *vi + gi + decay * *t;
                *t -= lr * *vi;
            }
        }
        Ok(())
    }
}

/// Linear warmup from `base/10` to `base`, then a multiplicative step down
/// at each configured epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LrSchedule {
    pub base: f64,
    pub warmup_epochs: usize,
    pub step_epochs: Vec<usize>,
    pub step_factor: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            base: 0.2,
            warmup_epochs: 10,
            step_epochs: vec![45, 55],
            step_factor: 0.1,
        }
    }
}

impl LrSchedule {
    pub fn rate(&self, epoch: usize) -> f64 {
        let mut lr = if epoch < self.warmup_epochs {
            let start = self.base / 10.0;
            start + (self.base - start) * epoch as f64 / self.warmup_epochs as f64
        } else {
            self.base
        };
        for &s in &self.step_epochs {
            if epoch >= s {
                lr *= self.step_factor;
            }
        }
        lr
    }
}
