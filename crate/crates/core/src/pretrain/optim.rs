//! SGD with momentum and L2 weight decay.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Rescales the raw gradient to this global L2 norm when it is exceeded.
    #[serde(default)]
    pub clip_norm: Option<f64>,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            clip_norm: None,
        }
    }
}

/// `v ← μ·v + (g + λ·p)`, `p ← p − lr·v`.
#[derive(Clone, Debug, Default)]
pub struct Sgd {
    pub config: SgdConfig,
    velocity: BTreeMap<String, Tensor<f32>>,
}

impl Sgd {
    pub fn new(config: SgdConfig) -> Self {
        Self {
            config,
            velocity: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, params: &mut BTreeMap<String, Tensor<f32>>, grads: &BTreeMap<String, Tensor<f32>>, lr: f64) {
        let mu = self.config.momentum as f32;
        let wd = self.config.weight_decay as f32;
        let gs = match self.config.clip_norm {
            Some(c) => {
                let norm = global_norm(grads);
                if norm > c && norm > 0.0 {
                    (c / norm) as f32
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        for (name, g) in grads {
            let p = match params.get_mut(name) {
                Some(p) => p,
                None => continue,
            };
            let v = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(p.shape()));
            for ((vi, &gi), pi) in v.data_mut().iter_mut().zip(g.data()).zip(p.data_mut().iter_mut()) {
                *vi = mu * *vi + gs * gi + wd * *pi;
                *pi -= lr as f32 * *vi;
            }
        }
    }
}

pub fn global_norm(grads: &BTreeMap<String, Tensor<f32>>) -> f64 {
    grads
        .values()
        .flat_map(|g| g.data())
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt()
}

/// Step schedule: `lr0 · factor^(epoch / step)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepSchedule {
    pub step_epochs: usize,
    pub factor: f64,
}

impl StepSchedule {
    pub fn lr_at(&self, lr0: f64, epoch: usize) -> f64 {
        if self.step_epochs == 0 {
            return lr0;
        }
        lr0 * self.factor.powi((epoch / self.step_epochs) as i32)
    }
}
