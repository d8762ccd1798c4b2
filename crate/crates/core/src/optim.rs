//! Trainable parameters and the AdamW update.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error, PartialEq)]
pub enum OptimError {
    #[error("non-finite gradient in parameter `{name}`")]
    NonFiniteGradient { name: String },
    #[error("optimizer state was built for {expected} parameters, got {got}")]
    ParameterCount { expected: usize, got: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self {
            name: name.into(),
            value,
            grad,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().fill(0.0);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 0.07,
            betas: (0.9, 0.999),
            eps: 1e-8,
        }
    }
}

/// AdamW with decoupled weight decay: the decay multiplies the value
/// directly and never passes through the moment estimates.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &[Parameter]) -> Self {
        Self {
            config,
            step: 0,
            first: params.iter().map(|p| vec![0.0; p.value.len()]).collect(),
            second: params.iter().map(|p| vec![0.0; p.value.len()]).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update using the gradients currently stored on `params`.
    /// Nothing is modified if any gradient is non-finite.
    pub fn step(&mut self, params: &mut [Parameter]) -> Result<(), OptimError> {
        if params.len() != self.first.len() {
            return Err(OptimError::ParameterCount {
                expected: self.first.len(),
                got: params.len(),
            });
        }
        if let Some(p) = params.iter().find(|p| !p.grad.is_finite()) {
            return Err(OptimError::NonFiniteGradient {
                name: p.name.clone(),
            });
        }
        self.step += 1;
        let AdamWConfig {
            lr,
            weight_decay,
            betas: (b1, b2),
            eps,
        } = self.config;
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        for ((p, m), v) in params.iter_mut().zip(&mut self.first).zip(&mut self.second) {
            let grad = p.grad.data();
            let value = p.value.data_mut();
            for i in 0..value.len() {
                let g = grad[i];
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                value[i] -= lr * weight_decay * value[i];
                value[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Single AdamW update in functional form.
pub fn adamw_step(
    params: &mut [Parameter],
    state: &mut AdamW,
) -> Result<(), OptimError> {
    state.step(params)
}
