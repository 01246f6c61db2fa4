use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr_max: f64,
    pub warmup: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr_max: 1e-4,
            warmup: 1000,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
        }
    }
}

/// Loss curve of one training run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean per-example loss of each epoch.
    pub epoch_losses: Vec<f64>,
}

/// Inverse-square-root schedule with linear warmup, scaled so the peak at
/// `step == warmup` equals `lr_max`.
pub fn warmup_lr(step: u64, warmup: u64, lr_max: f64) -> f64 {
    let s = step.max(1) as f64;
    let w = warmup.max(1) as f64;
    lr_max * (s.powf(-0.5)).min(s * w.powf(-1.5)) * w.sqrt()
}

/// Adam moments for every parameter of one store.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Self {
        let zeros = || {
            params
                .ids()
                .map(|id| vec![0.0; params.value(id).numel()])
                .collect()
        };
        Adam {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn current_lr(&self) -> f64 {
        warmup_lr(self.step.max(1), self.config.warmup, self.config.lr_max)
    }

    /// Applies one update from the accumulated gradients, then clears them.
    /// Parameters without a gradient are left untouched.
    pub fn step(&mut self, params: &mut ParamStore) -> Result<()> {
        if !params.has_grads() {
            return Err(Error::MissingGradients);
        }
        self.step += 1;
        let c = self.config;
        let lr = warmup_lr(self.step, c.warmup, c.lr_max);
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let (grad, value) = params.grad_and_value_mut(id);
            let Some(grad) = grad else { continue };
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            for (((p, &g), mi), vi) in value.data_mut().iter_mut().zip(grad).zip(m).zip(v) {
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * g;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * g * g;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *p -= lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
        params.zero_grads();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Graph, Tensor};

    #[test]
    fn peak_at_warmup() {
        for w in [1, 10, 4000] {
            assert!((warmup_lr(w, w, 1e-4) - 1e-4).abs() < 1e-18);
        }
    }

    #[test]
    fn increases_during_warmup_then_decays() {
        let w = 50;
        for s in 1..w {
            assert!(warmup_lr(s + 1, w, 1.0) > warmup_lr(s, w, 1.0));
        }
        for s in w..w + 100 {
            assert!(warmup_lr(s + 1, w, 1.0) < warmup_lr(s, w, 1.0));
        }
    }

    #[test]
    fn step_moves_toward_minimum() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::scalar(1.0));
        let mut adam = Adam::new(
            AdamConfig {
                lr_max: 0.1,
                warmup: 1,
                ..Default::default()
            },
            &store,
        );
        let grads = {
            let mut g = Graph::new(&store);
            let xv = g.param(x);
            let l = g.mul(xv, xv).unwrap();
            g.backward(l).unwrap()
        };
        store.accumulate(&grads);
        adam.step(&mut store).unwrap();
        let after = store.value(x).item();
        assert!(after < 1.0 && after > 0.0);
        assert!(store.grad(x).is_none());
    }

    #[test]
    fn step_without_gradients_fails() {
        let mut store = ParamStore::new();
        store.add("x", Tensor::scalar(1.0));
        let mut adam = Adam::new(AdamConfig::default(), &store);
        assert!(matches!(adam.step(&mut store), Err(Error::MissingGradients)));
    }
}
