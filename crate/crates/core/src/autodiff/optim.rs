//! Adam optimizer.

use alloc::vec::Vec;

use super::params::ParamStore;
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moment estimates, one pair per parameter.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub config: AdamConfig,
    step: u64,
    /// `β1^t` and `β2^t` for bias correction.
    beta_pow: (f64, f64),
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig, params: &ParamStore<T>) -> Self {
        let zeros = || params.iter().map(|(_, p)| Tensor::zeros(p.shape())).collect::<Vec<_>>();
        Self { config, step: 0, beta_pow: (1.0, 1.0), m: zeros(), v: zeros() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one bias-corrected update.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Tensor<T>]) -> Result<()> {
        if grads.len() != params.len() || grads.len() != self.m.len() {
            return Err(Error::Shape {
                op: "Adam::step",
                detail: alloc::format!("{} gradients for {} parameters", grads.len(), params.len()),
            });
        }
        self.step += 1;
        let c = self.config;
        self.beta_pow = (self.beta_pow.0 * c.beta1, self.beta_pow.1 * c.beta2);
        let bc1 = 1.0 - self.beta_pow.0;
        let bc2 = 1.0 - self.beta_pow.1;
        let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
        let (lr, eps) = (T::from_f64(c.lr / bc1), T::from_f64(c.eps));
        let inv_bc2 = T::from_f64(1.0 / bc2);
        let one = T::one();
        for (((id, g), m), v) in
            params.ids().collect::<Vec<_>>().into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v)
        {
            let p = params.get_mut(id);
            if g.shape() != p.shape() {
                return Err(Error::Shape {
                    op: "Adam::step",
                    detail: alloc::format!("gradient {:?} for parameter {:?}", g.shape(), p.shape()),
                });
            }
            for (((pi, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *mi = b1 * *mi + (one - b1) * gi;
                *vi = b2 * *vi + (one - b2) * gi * gi;
                *pi -= lr * *mi / ((*vi * inv_bc2).sqrt() + eps);
            }
        }
        Ok(())
    }
}
