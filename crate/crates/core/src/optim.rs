use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{config, invalid, Error, Result};
use crate::nn::Params;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Algorithm {
    Adam { beta1: f64, beta2: f64, eps: f64 },
    Rmsprop { decay: f64, eps: f64 },
    Sgd { momentum: f64 },
}

impl Algorithm {
    /// Progressive-growing defaults: β1 = 0, β2 = 0.99.
    pub fn adam_progressive() -> Self {
        Algorithm::Adam {
            beta1: 0.0,
            beta2: 0.99,
            eps: 1e-8,
        }
    }

    pub fn adam(beta1: f64, beta2: f64) -> Self {
        Algorithm::Adam { beta1, beta2, eps: 1e-8 }
    }

    pub fn rmsprop(decay: f64) -> Self {
        Algorithm::Rmsprop { decay, eps: 1e-8 }
    }

    pub fn sgd(momentum: f64) -> Self {
        Algorithm::Sgd { momentum }
    }
}

#[derive(Clone, Debug)]
struct Slots {
    first: Vec<f64>,
    second: Vec<f64>,
}

/// Optimiser algorithm, learning rate, step counter and per-parameter accumulators.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub algorithm: Algorithm,
    learning_rate: f64,
    step_count: u64,
    slots: BTreeMap<String, Slots>,
}

impl OptimizerState {
    pub fn new(algorithm: Algorithm, learning_rate: f64) -> Result<Self> {
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(config(format!("learning rate must be positive, got {learning_rate}")));
        }
        Ok(Self {
            algorithm,
            learning_rate,
            step_count: 0,
            slots: BTreeMap::new(),
        })
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    pub fn set_learning_rate(&mut self, lr: f64) -> Result<()> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(config(format!("learning rate must be positive, got {lr}")));
        }
        self.learning_rate = lr;
        Ok(())
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Apply one update to every parameter that has a gradient.
    ///
    /// All gradients are validated first, so a non-finite or mis-shaped
    /// gradient leaves every parameter and accumulator untouched.
    pub fn step(&mut self, params: &mut Params, grads: &BTreeMap<String, Tensor<f32>>) -> Result<()> {
        for (name, g) in grads {
            let p = params.get(name)?;
            if p.shape() != g.shape() {
                return Err(invalid(format!(
                    "gradient for `{name}` has shape {:?}, parameter has {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            if !g.all_finite() {
                return Err(Error::NonFiniteGradient { param: name.clone() });
            }
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let lr = self.learning_rate;
        for (name, g) in grads {
            let p = params.get_mut(name).expect("validated above");
            let slots = self.slots.entry(name.clone()).or_insert_with(|| Slots {
                first: vec![0.0; g.len()],
                second: vec![0.0; g.len()],
            });
            match self.algorithm {
                Algorithm::Adam { beta1, beta2, eps } => {
                    let c1 = 1.0 - beta1.powi(t);
                    let c2 = 1.0 - beta2.powi(t);
                    for i in 0..g.len() {
                        let gi = g[i] as f64;
                        slots.first[i] = beta1 * slots.first[i] + (1.0 - beta1) * gi;
                        slots.second[i] = beta2 * slots.second[i] + (1.0 - beta2) * gi * gi;
                        let mhat = slots.first[i] / c1;
                        let vhat = slots.second[i] / c2;
                        p[i] = (p[i] as f64 - lr * mhat / (vhat.sqrt() + eps)) as f32;
                    }
                }
                Algorithm::Rmsprop { decay, eps } => {
                    for i in 0..g.len() {
                        let gi = g[i] as f64;
                        slots.second[i] = decay * slots.second[i] + (1.0 - decay) * gi * gi;
                        p[i] = (p[i] as f64 - lr * gi / (slots.second[i].sqrt() + eps)) as f32;
                    }
                }
                Algorithm::Sgd { momentum } => {
                    for i in 0..g.len() {
                        let gi = g[i] as f64;
                        slots.first[i] = momentum * slots.first[i] + gi;
                        p[i] = (p[i] as f64 - lr * slots.first[i]) as f32;
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(v: f32) -> (Params, BTreeMap<String, Tensor<f32>>) {
        let mut p = Params::new();
        p.insert("w", Tensor::scalar(1.0));
        let mut g = BTreeMap::new();
        g.insert("w".to_string(), Tensor::scalar(v));
        (p, g)
    }

    #[test]
    fn sgd_without_momentum() {
        let (mut p, g) = single(2.0);
        let mut opt = OptimizerState::new(Algorithm::sgd(0.0), 0.1).unwrap();
        opt.step(&mut p, &g).unwrap();
        assert!((p.get("w").unwrap()[0] - 0.8).abs() < 1e-7);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn adam_first_step_with_zero_beta1() {
        // m = g, v = (1-β2) g², bias-corrected v̂ = g², update = -lr·g/(|g|+ε)
        let (mut p, g) = single(0.3);
        let mut opt = OptimizerState::new(Algorithm::adam(0.0, 0.99), 1e-3).unwrap();
        opt.step(&mut p, &g).unwrap();
        let expected = 1.0 - 1e-3 * 0.3 / (0.3 + 1e-8);
        assert!((p.get("w").unwrap()[0] as f64 - expected).abs() < 1e-7);
    }

    #[test]
    fn rmsprop_zero_gradient_leaves_param() {
        let (mut p, g) = single(0.0);
        let mut opt = OptimizerState::new(Algorithm::rmsprop(0.9), 1e-2).unwrap();
        opt.step(&mut p, &g).unwrap();
        assert_eq!(p.get("w").unwrap()[0], 1.0);
    }

    #[test]
    fn nan_gradient_rejected_without_partial_update() {
        let mut p = Params::new();
        p.insert("a", Tensor::scalar(1.0));
        p.insert("b", Tensor::scalar(1.0));
        let mut g = BTreeMap::new();
        g.insert("a".to_string(), Tensor::scalar(1.0));
        g.insert("b".to_string(), Tensor::scalar(f32::NAN));
        let mut opt = OptimizerState::new(Algorithm::sgd(0.0), 0.1).unwrap();
        let before = p.clone();
        assert!(matches!(opt.step(&mut p, &g), Err(Error::NonFiniteGradient { .. })));
        assert_eq!(p, before);
        assert_eq!(opt.step_count(), 0);
    }

    #[test]
    fn rejects_non_positive_learning_rate() {
        assert!(OptimizerState::new(Algorithm::sgd(0.0), 0.0).is_err());
    }
}
