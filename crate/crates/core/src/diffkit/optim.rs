use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
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
            lr: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Moments {
    first: Vec<f64>,
    second: Vec<f64>,
}

/// Adaptive-moment optimizer with decoupled weight decay.
///
/// Moments are keyed by parameter name so that a subset of parameters can be
/// stepped (frozen groups are simply not passed in).
#[derive(Clone, Debug)]
pub struct AdamW {
    config: AdamWConfig,
    moments: BTreeMap<String, Moments>,
    step: u64,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Result<Self> {
        if !(config.lr > 0.0) {
            return Err(Error::Argument(format!(
                "learning rate must be positive, got {}",
                config.lr
            )));
        }
        for (name, b) in [("beta1", config.beta1), ("beta2", config.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Argument(format!(
                    "{name} must lie in [0, 1), got {b}"
                )));
            }
        }
        Ok(AdamW {
            config,
            moments: BTreeMap::new(),
            step: 0,
        })
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.config
    }

    /// Number of completed steps.
    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Apply one update to every `(name, param, grad)` triple.
    ///
    /// Validation runs before any mutation: a shape mismatch or a non-finite
    /// gradient leaves parameters, moments and the step counter untouched.
    pub fn step(&mut self, updates: &mut [(&str, &mut Tensor, &[f64])]) -> Result<()> {
        for (name, param, grad) in updates.iter() {
            if param.len() != grad.len() {
                return Err(Error::shape(
                    "adamw_step",
                    format!(
                        "parameter `{name}` has {} values but its gradient has {}",
                        param.len(),
                        grad.len()
                    ),
                ));
            }
            if let Some(m) = self.moments.get(*name) {
                if m.first.len() != param.len() {
                    return Err(Error::shape(
                        "adamw_step",
                        format!("parameter `{name}` changed size since the previous step"),
                    ));
                }
            }
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteGradient((*name).to_string()));
            }
        }

        self.step += 1;
        let AdamWConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let t = self.step as i32;
        let bias1 = 1.0 - beta1.powi(t);
        let bias2 = 1.0 - beta2.powi(t);

        for (name, param, grad) in updates.iter_mut() {
            let n = param.len();
            let m = self
                .moments
                .entry((*name).to_string())
                .or_insert_with(|| Moments {
                    first: vec![0.0; n],
                    second: vec![0.0; n],
                });
            for (((theta, g), m1), m2) in param
                .values_mut()
                .iter_mut()
                .zip(grad.iter())
                .zip(m.first.iter_mut())
                .zip(m.second.iter_mut())
            {
                *m1 = beta1 * *m1 + (1.0 - beta1) * g;
                *m2 = beta2 * *m2 + (1.0 - beta2) * g * g;
                let m_hat = *m1 / bias1;
                let v_hat = *m2 / bias2;
                *theta -= lr * (m_hat / (v_hat.sqrt() + eps) + weight_decay * *theta);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(lr: f64, wd: f64) -> AdamWConfig {
        AdamWConfig {
            lr,
            weight_decay: wd,
            ..AdamWConfig::default()
        }
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut opt = AdamW::new(cfg(0.1, 0.0)).unwrap();
        let mut p = Tensor::vector(vec![1.0, -2.0, 3.5]);
        let before = p.clone();
        opt.step(&mut [("p", &mut p, &[0.0, 0.0, 0.0])]).unwrap();
        assert_eq!(p.values(), before.values());
        assert_eq!(opt.steps(), 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m_hat = v_hat = 1 after bias correction
        let mut opt = AdamW::new(cfg(0.1, 0.0)).unwrap();
        let mut p = Tensor::scalar(1.0);
        opt.step(&mut [("p", &mut p, &[1.0])]).unwrap();
        assert!((p.values()[0] - 0.9).abs() < 1e-8);
    }

    #[test]
    fn decay_only_step() {
        let mut opt = AdamW::new(cfg(0.1, 0.1)).unwrap();
        let mut p = Tensor::scalar(1.0);
        opt.step(&mut [("p", &mut p, &[0.0])]).unwrap();
        assert!((p.values()[0] - 0.99).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_rejects_whole_step() {
        let mut opt = AdamW::new(cfg(0.1, 0.0)).unwrap();
        let mut a = Tensor::scalar(1.0);
        let mut b = Tensor::scalar(1.0);
        let err = opt
            .step(&mut [("a", &mut a, &[1.0]), ("b", &mut b, &[f64::NAN])])
            .unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient(ref n) if n == "b"));
        assert_eq!(a.values()[0], 1.0);
        assert_eq!(opt.steps(), 0);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut opt = AdamW::new(cfg(0.1, 0.0)).unwrap();
        let mut a = Tensor::vector(vec![1.0, 2.0]);
        assert!(matches!(
            opt.step(&mut [("a", &mut a, &[1.0])]),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn rejects_bad_hyperparameters() {
        assert!(AdamW::new(cfg(0.0, 0.0)).is_err());
        assert!(AdamW::new(AdamWConfig {
            beta2: 1.0,
            ..AdamWConfig::default()
        })
        .is_err());
    }

    #[test]
    fn counter_increments_once_per_step() {
        let mut opt = AdamW::new(cfg(0.01, 0.01)).unwrap();
        let mut p = Tensor::vector(vec![0.5; 4]);
        for k in 1..=5 {
            opt.step(&mut [("p", &mut p, &[0.1, -0.2, 0.3, 0.0])])
                .unwrap();
            assert_eq!(opt.steps(), k);
        }
    }
}
