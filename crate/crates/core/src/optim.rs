//! Adadelta.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdadeltaConfig {
    pub rho: f64,
    pub eps: f64,
    pub lr: f64,
}

impl Default for AdadeltaConfig {
    fn default() -> Self {
        AdadeltaConfig {
            rho: 0.9,
            eps: 1e-6,
            lr: 1.0,
        }
    }
}

/// Running averages `E[g²]` and `E[Δ²]`, one buffer per registered parameter.
#[derive(Debug, Clone)]
pub struct Adadelta {
    pub config: AdadeltaConfig,
    sq_grad: Vec<Vec<f64>>,
    sq_delta: Vec<Vec<f64>>,
}

impl Adadelta {
    pub fn new(config: AdadeltaConfig) -> Self {
        Adadelta {
            config,
            sq_grad: Vec::new(),
            sq_delta: Vec::new(),
        }
    }

    pub fn accumulators(&self, index: usize) -> Option<(&[f64], &[f64])> {
        Some((self.sq_grad.get(index)?, self.sq_delta.get(index)?))
    }

    /// One update over `params`, then zeroes their gradients. The parameter
    /// list must be presented in the same order on every call.
    pub fn step(&mut self, params: Vec<&mut Tensor>) -> Result<()> {
        if self.sq_grad.is_empty() {
            self.sq_grad = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.sq_delta = self.sq_grad.clone();
        }
        if self.sq_grad.len() != params.len()
            || params.iter().zip(&self.sq_grad).any(|(p, a)| p.len() != a.len())
        {
            return Err(Error::invalid(
                "adadelta",
                "parameter set changed since the first step",
            ));
        }
        if let Some(index) = params.iter().position(|p| p.grad().is_none()) {
            return Err(Error::MissingGradient { index });
        }
        let AdadeltaConfig { rho, eps, lr } = self.config;
        for (i, p) in params.into_iter().enumerate() {
            let (data, grad) = p.data_and_grad_mut();
            let grad = grad.expect("checked above");
            let eg = &mut self.sq_grad[i];
            let ed = &mut self.sq_delta[i];
            for j in 0..data.len() {
                let g = grad[j];
                eg[j] = rho * eg[j] + (1.0 - rho) * g * g;
                let delta = -((ed[j] + eps).sqrt() / (eg[j] + eps).sqrt()) * g;
                ed[j] = rho * ed[j] + (1.0 - rho) * delta * delta;
                data[j] += lr * delta;
                grad[j] = 0.0;
            }
        }
        Ok(())
    }
}
