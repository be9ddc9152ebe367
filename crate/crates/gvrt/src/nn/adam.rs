//! Adam optimizer with two learning-rate groups.

use serde::{Deserialize, Serialize};

use super::Param;

/// Which learning rate a parameter tensor uses: the (lower) backbone rate for
/// the pretr-style visual stem, the higher rate for freshly added modules.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Backbone,
    New,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr_backbone: f64,
    pub lr_new: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 coefficient added to raw gradients before the moment updates.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr_backbone: 5e-5,
            lr_new: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Adam state: first/second moments per parameter tensor, allocated lazily on
/// the first step so the optimizer can be built before the model.
pub struct Adam {
    pub cfg: AdamConfig,
    t: u64,
    moments: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam { cfg, t: 0, moments: Vec::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One update over all parameter tensors, passed in a stable order.
    pub fn step(&mut self, params: &mut [(&mut Param, ParamGroup)]) {
        if self.moments.is_empty() {
            self.moments = params
                .iter()
                .map(|(p, _)| (vec![0.0; p.len()], vec![0.0; p.len()]))
                .collect();
        }
        assert_eq!(self.moments.len(), params.len(), "parameter set changed between steps");
        self.t += 1;
        let b1 = self.cfg.beta1;
        let b2 = self.cfg.beta2;
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        for ((param, group), (m, v)) in params.iter_mut().zip(&mut self.moments) {
            let lr = match group {
                ParamGroup::Backbone => self.cfg.lr_backbone,
                ParamGroup::New => self.cfg.lr_new,
            };
            for i in 0..param.len() {
                let g = param.grad[i] + self.cfg.weight_decay * param.value[i];
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                param.value[i] -= lr * m_hat / (v_hat.sqrt() + self.cfg.eps);
            }
        }
    }
}
