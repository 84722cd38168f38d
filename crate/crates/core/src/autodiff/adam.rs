use serde::{Deserialize, Serialize};

use crate::autodiff::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam with bias-corrected moments.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, step: 0, first: Vec::new(), second: Vec::new() }
    }

    /// Applies one update to every `(name, tensor)` pair using the tensor's
    /// stored gradient (absent means zero). Parameters must be passed in the
    /// same order on every call. Nothing is modified when any gradient is
    /// non-finite.
    pub fn step<'a, I>(&mut self, params: I) -> Result<()>
    where
        I: IntoIterator<Item = (&'a str, &'a mut Tensor)>,
    {
        let params: Vec<(&str, &mut Tensor)> = params.into_iter().collect();
        for (name, t) in &params {
            if let Some(g) = &t.grad {
                if g.len() != t.data.len() {
                    return Err(Error::InvalidInput(format!("gradient of {name} has the wrong length")));
                }
                if let Some(i) = g.iter().position(|x| !x.is_finite()) {
                    return Err(Error::Numerical(format!("non-finite gradient in parameter {name} at element {i}")));
                }
            }
        }
        if self.first.is_empty() {
            self.first = params.iter().map(|(_, t)| vec![0.0; t.data.len()]).collect();
            self.second = self.first.clone();
        } else if self.first.len() != params.len()
            || self.first.iter().zip(&params).any(|(m, (_, t))| m.len() != t.data.len())
        {
            return Err(Error::InvalidInput("parameter set changed between optimizer steps".into()));
        }

        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (k, (_, t)) in params.into_iter().enumerate() {
            let zeros;
            let g = match &t.grad {
                Some(g) => g,
                None => {
                    zeros = vec![0.0; t.data.len()];
                    &zeros
                }
            };
            for (((m, v), p), &gi) in self.first[k].iter_mut().zip(&mut self.second[k]).zip(&mut t.data).zip(g) {
                *m = beta1 * *m + (1.0 - beta1) * gi;
                *v = beta2 * *v + (1.0 - beta2) * gi * gi;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(x: f64) -> Tensor {
        Tensor::new(vec![1], vec![x]).unwrap().with_grad()
    }

    #[test]
    fn zero_gradient_keeps_parameters() {
        let mut p = param(1.5);
        p.grad = Some(vec![0.0]);
        let mut adam = AdamState::new(AdamConfig::default());
        adam.step([("p", &mut p)]).unwrap();
        assert_eq!(p.data, vec![1.5]);
        assert_eq!(adam.step, 1);
    }

    #[test]
    fn first_step_has_magnitude_lr() {
        for g in [1e-3, 0.7, -25.0] {
            let mut p = param(0.0);
            p.grad = Some(vec![g]);
            let mut adam = AdamState::new(AdamConfig::with_lr(0.01));
            adam.step([("p", &mut p)]).unwrap();
            // |m̂ / sqrt(v̂)| = 1 after one step
            let expected = 0.01 * g.abs() / (g.abs() + 1e-8);
            assert!((p.data[0].abs() - expected).abs() < 1e-15);
            assert_eq!(p.data[0].signum(), -g.signum());
        }
    }

    #[test]
    fn scalar_quadratic_converges() {
        let mut p = param(1.0);
        let mut adam = AdamState::new(AdamConfig::with_lr(0.1));
        for _ in 0..200 {
            p.grad = Some(vec![p.data[0]]);
            adam.step([("theta", &mut p)]).unwrap();
        }
        assert!(p.data[0].abs() < 0.01, "theta = {}", p.data[0]);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut a = param(1.0);
        let mut b = param(2.0);
        a.grad = Some(vec![0.5]);
        b.grad = Some(vec![f64::NAN]);
        let mut adam = AdamState::new(AdamConfig::default());
        let err = adam.step([("enc0.weight", &mut a), ("enc0.bias", &mut b)]).unwrap_err();
        assert!(matches!(err, Error::Numerical(ref m) if m.contains("enc0.bias")));
        assert_eq!(a.data, vec![1.0]);
        assert_eq!(adam.step, 0);
    }

    #[test]
    fn deterministic() {
        let run = || {
            let mut p = param(0.3);
            let mut adam = AdamState::new(AdamConfig::with_lr(0.05));
            for i in 0..50 {
                p.grad = Some(vec![(p.data[0] * 3.0).sin() + i as f64 * 1e-3]);
                adam.step([("p", &mut p)]).unwrap();
            }
            p.data[0]
        };
        assert_eq!(run().to_bits(), run().to_bits());
    }
}
