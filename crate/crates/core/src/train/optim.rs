//! AdamW with decoupled weight decay, and the linear learning-rate decay.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

struct Moments<E> {
    m: Vec<E>,
    v: Vec<E>,
}

/// Optimizer state keyed by parameter name. One `begin_step` per training
/// step, then one `update` per parameter; a parameter whose gradient never
/// arrived is treated as having gradient zero (its moments decay and the
/// decoupled decay still applies).
pub struct AdamW<E: Element> {
    pub config: AdamWConfig,
    step: u64,
    state: HashMap<String, Moments<E>>,
}

impl<E: Element> AdamW<E> {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW {
            config,
            step: 0,
            state: HashMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    /// Decoupled update:
    ///   m = b1 m + (1-b1) g;  v = b2 v + (1-b2) g^2
    ///   theta -= lr * mhat / (sqrt(vhat) + eps) + lr * decay * theta
    /// with bias-corrected mhat/vhat. Publishes a fresh parameter tensor
    /// (grad cleared) in place of the old one.
    pub fn update(&mut self, name: &str, param: &mut Tensor<E>, lr: f64) -> Result<()> {
        if self.step == 0 {
            return Err(Error::Contract("AdamW::update before begin_step".into()));
        }
        let n = param.numel();
        let grad = param.grad().unwrap_or_else(|| vec![E::zero(); n]);
        let entry = self.state.entry(name.to_string()).or_insert_with(|| Moments {
            m: vec![E::zero(); n],
            v: vec![E::zero(); n],
        });
        if entry.m.len() != n {
            return Err(Error::Contract(format!(
                "optimizer state for {name} has {} entries, parameter has {n}",
                entry.m.len()
            )));
        }
        let b1 = E::from_f64(self.config.beta1);
        let b2 = E::from_f64(self.config.beta2);
        let one_b1 = E::from_f64(1.0 - self.config.beta1);
        let one_b2 = E::from_f64(1.0 - self.config.beta2);
        let bc1 = E::from_f64(1.0 - self.config.beta1.powi(self.step as i32));
        let bc2 = E::from_f64(1.0 - self.config.beta2.powi(self.step as i32));
        let eps = E::from_f64(self.config.eps);
        let lr_e = E::from_f64(lr);
        let decay = E::from_f64(lr * self.config.weight_decay);

        let mut data = param.data().to_vec();
        for i in 0..n {
            let g = grad[i];
            entry.m[i] = b1 * entry.m[i] + one_b1 * g;
            entry.v[i] = b2 * entry.v[i] + one_b2 * g * g;
            let mhat = entry.m[i] / bc1;
            let vhat = entry.v[i] / bc2;
            data[i] = data[i] - lr_e * (mhat / (vhat.sqrt() + eps)) - decay * data[i];
        }
        *param = param.param_like(data)?;
        Ok(())
    }
}

/// Linear decay to zero, no warmup: base_lr * (1 - step/total); steps past
/// the end clamp to 0.
pub fn lr_schedule(step: u64, total_steps: u64, base_lr: f64) -> f64 {
    if total_steps == 0 || step >= total_steps {
        return 0.0;
    }
    base_lr * (1.0 - step as f64 / total_steps as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        // g = 1: mhat = 1, vhat = 1 -> delta = -lr / (1 + eps)
        let mut opt = AdamW::<f64>::new(AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        });
        let mut p = Tensor::param(vec![1], vec![0.0]).unwrap();
        p.accumulate_grad(&[1.0]);
        opt.begin_step();
        opt.update("p", &mut p, 0.1).unwrap();
        assert!((p.data()[0] + 0.1).abs() < 1e-6, "{}", p.data()[0]);
    }

    #[test]
    fn zero_gradient_zero_decay_is_identity() {
        let mut opt = AdamW::<f64>::new(AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        });
        let mut p = Tensor::param(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        opt.begin_step();
        opt.update("p", &mut p, 0.1).unwrap();
        assert_eq!(p.data(), &[1.0, -2.0, 0.5]);
    }

    #[test]
    fn zero_gradient_with_decay_is_pure_shrinkage() {
        let mut opt = AdamW::<f64>::new(AdamWConfig {
            weight_decay: 0.01,
            ..AdamWConfig::default()
        });
        let mut p = Tensor::param(vec![2], vec![2.0, -4.0]).unwrap();
        opt.begin_step();
        opt.update("p", &mut p, 0.5).unwrap();
        let shrink = 1.0 - 0.5 * 0.01;
        assert!((p.data()[0] - 2.0 * shrink).abs() < 1e-12);
        assert!((p.data()[1] + 4.0 * shrink).abs() < 1e-12);
    }

    #[test]
    fn update_replaces_parameter_and_clears_grad() {
        let mut opt = AdamW::<f64>::new(AdamWConfig::default());
        let mut p = Tensor::param(vec![1], vec![1.0]).unwrap();
        p.accumulate_grad(&[2.0]);
        opt.begin_step();
        opt.update("p", &mut p, 0.01).unwrap();
        assert!(p.grad().is_none());
        assert!(p.requires_grad());
    }

    #[test]
    fn schedule_endpoints_and_midpoint() {
        assert_eq!(lr_schedule(0, 100, 5e-5), 5e-5);
        assert_eq!(lr_schedule(100, 100, 5e-5), 0.0);
        assert!((lr_schedule(50, 100, 5e-5) - 2.5e-5).abs() < 1e-20);
        assert_eq!(lr_schedule(150, 100, 5e-5), 0.0);
    }
}
