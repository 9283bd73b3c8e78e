//! Adam with bias-corrected moment estimates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Optimizer state: one first- and second-moment buffer per parameter.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[&Tensor<T>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::shape(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![T::zero(); p.len()]).collect();
            self.second = self.first.clone();
        }
        if self.first.len() != params.len() {
            return Err(Error::shape("optimizer state does not match the parameter list"));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != g.len() || self.first[i].len() != p.len() {
                return Err(Error::shape(format!("parameter {i}: state/gradient size mismatch")));
            }
        }
        self.step += 1;
        let c = self.config;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let lr = T::lit(c.lr);
        let eps = T::lit(c.epsilon);
        let correct1 = T::one() - T::lit(c.beta1.powi(self.step as i32));
        let correct2 = T::one() - T::lit(c.beta2.powi(self.step as i32));
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = b1 * m[j] + (T::one() - b1) * gj;
                v[j] = b2 * v[j] + (T::one() - b2) * gj * gj;
                let mhat = m[j] / correct1;
                let vhat = v[j] / correct2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = Tensor::<f64>::from_f64([3], &[1.0, -2.0, 0.5]).unwrap();
        let before = p.clone();
        let g = Tensor::zeros([3]);
        let mut adam = Adam::new(AdamConfig::default());
        for _ in 0..3 {
            adam.step(&mut [&mut p], &[&g]).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_lr_regardless_of_scale() {
        for g in [1e-4, 0.3, 250.0] {
            let mut p = Tensor::<f64>::zeros([1]);
            let grad = Tensor::from_f64([1], &[g]).unwrap();
            let mut adam = Adam::new(AdamConfig::default());
            adam.step(&mut [&mut p], &[&grad]).unwrap();
            let moved = p.data()[0].abs();
            assert!((moved - 1e-3).abs() < 1e-3 * 1e-8 / g + 1e-15, "g = {g}: {moved}");
        }
    }

    #[test]
    fn three_steps_on_quadratic_match_recursion() {
        // f(x) = (x - 3)^2, gradient 2 (x - 3), starting at x = 0.
        let cfg = AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        };
        let (mut x, mut m, mut v) = (0.0f64, 0.0f64, 0.0f64);
        let mut expected = Vec::new();
        for t in 1..=3 {
            let g = 2.0 * (x - 3.0);
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mhat = m / (1.0 - 0.9f64.powi(t));
            let vhat = v / (1.0 - 0.999f64.powi(t));
            x -= 0.1 * mhat / (vhat.sqrt() + 1e-8);
            expected.push(x);
        }
        let mut p = Tensor::<f64>::zeros([1]);
        let mut adam = Adam::new(cfg);
        for want in expected {
            let g = Tensor::from_f64([1], &[2.0 * (p.data()[0] - 3.0)]).unwrap();
            adam.step(&mut [&mut p], &[&g]).unwrap();
            assert!((p.data()[0] - want).abs() < 1e-14);
        }
    }

    #[test]
    fn mismatched_state_is_rejected() {
        let mut p = Tensor::<f32>::zeros([2]);
        let g = Tensor::<f32>::zeros([3]);
        let mut adam = Adam::new(AdamConfig::default());
        assert!(adam.step(&mut [&mut p], &[&g]).is_err());
    }
}
