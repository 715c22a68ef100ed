//! Adaptive-moment optimizer with decoupled weight decay, over flat slices.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-2,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// First/second moment accumulators plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamWState {
    pub fn new(num_params: usize) -> Self {
        AdamWState {
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            step: 0,
        }
    }

    /// One ascent step: `params[i] += lr * mhat/(sqrt(vhat)+eps)` for the
    /// ascent direction `grad`, with decoupled decay pulling params to zero.
    /// Returns the per-parameter deltas applied.
    pub fn ascend(&mut self, cfg: &AdamWConfig, params: &mut [f64], grad: &[f64]) {
        assert_eq!(params.len(), grad.len());
        assert_eq!(params.len(), self.m.len());
        self.step += 1;
        let b1c = 1.0 - cfg.beta1.powi(self.step as i32);
        let b2c = 1.0 - cfg.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * grad[i];
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
            let mhat = self.m[i] / b1c;
            let vhat = self.v[i] / b2c;
            params[i] += cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
            params[i] -= cfg.lr * cfg.weight_decay * params[i];
        }
    }

    /// Descent step (used for logit minimization updates).
    pub fn descend(&mut self, cfg: &AdamWConfig, params: &mut [f64], grad: &[f64]) {
        let neg: Vec<f64> = grad.iter().map(|g| -g).collect();
        self.ascend(cfg, params, &neg);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let cfg = AdamWConfig::default();
        let mut state = AdamWState::new(3);
        let mut params = vec![1.0, -2.0, 0.5];
        state.ascend(&cfg, &mut params, &[0.0; 3]);
        assert_eq!(params, vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn first_step_moves_by_lr_in_gradient_sign() {
        let cfg = AdamWConfig {
            lr: 0.1,
            ..AdamWConfig::default()
        };
        let mut state = AdamWState::new(2);
        let mut params = vec![0.0, 0.0];
        state.ascend(&cfg, &mut params, &[3.0, -0.002]);
        // Bias correction makes the first step lr * sign(grad) up to eps.
        assert!((params[0] - 0.1).abs() < 1e-4);
        assert!((params[1] + 0.1).abs() < 1e-4);
    }

    #[test]
    fn weight_decay_shrinks_without_gradient_signal() {
        let cfg = AdamWConfig {
            lr: 1.0,
            weight_decay: 0.5,
            ..AdamWConfig::default()
        };
        let mut state = AdamWState::new(1);
        let mut params = vec![4.0];
        state.ascend(&cfg, &mut params, &[0.0]);
        assert_eq!(params, vec![2.0]);
    }
}
