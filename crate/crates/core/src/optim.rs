use alloc::vec;
use alloc::vec::Vec;

use crate::math;
use crate::params::ModelParams;
use crate::tensor::Precision;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction over every tracked tensor of a [`ModelParams`].
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    precision: Precision,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, params: &ModelParams, precision: Precision) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        Self {
            cfg,
            precision,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update from the accumulated gradients.
    pub fn step(&mut self, params: &mut ModelParams) {
        self.step += 1;
        let t = self.step as f64;
        let c1 = 1.0 - math::powf(self.cfg.beta1, t);
        let c2 = 1.0 - math::powf(self.cfg.beta2, t);
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        for (((_, tensor), m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let Some(grad) = tensor.grad.take() else { continue };
            for (i, value) in tensor.data_mut().iter_mut().enumerate() {
                let g = grad[i];
                m[i] = self.precision.round(beta1 * m[i] + (1.0 - beta1) * g);
                v[i] = self.precision.round(beta2 * v[i] + (1.0 - beta2) * g * g);
                let update = lr * (m[i] / c1) / (math::sqrt(v[i] / c2) + eps);
                *value = self.precision.round(*value - update);
            }
            tensor.grad = Some(grad);
        }
    }
}
