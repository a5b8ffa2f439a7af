//! AdamW with decoupled weight decay.

use alloc::vec::Vec;

use crate::array::Array;
use crate::error::{Error, Result};
use crate::model::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::param("lr", "learning rate must be finite and nonnegative"));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::param(name, "must lie in [0, 1)"));
            }
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::param("eps", "eps must be positive and weight decay nonnegative"));
        }
        Ok(())
    }
}

/// Moment estimates for every trainable entry of a [`ParamStore`], in store
/// order.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<Array>,
    v: Vec<Array>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &ParamStore) -> Result<Self> {
        config.validate()?;
        let zeros: Vec<Array> = params
            .entries()
            .iter()
            .filter(|e| e.trainable)
            .map(|e| Array::zeros(e.value.shape()))
            .collect();
        Ok(Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        })
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update. `grads` follow the trainable entries in store order.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Array]) -> Result<()> {
        if grads.len() != self.m.len() {
            return Err(Error::shape("adamw gradients", &[self.m.len()], &[grads.len()]));
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - libm::pow(c.beta1, self.step as f64);
        let bc2 = 1.0 - libm::pow(c.beta2, self.step as f64);
        let trainable = params.entries_mut().iter_mut().filter(|e| e.trainable);
        for (((e, g), m), v) in trainable.zip(grads).zip(&mut self.m).zip(&mut self.v) {
            if g.shape() != e.value.shape() {
                return Err(Error::shape("adamw", e.value.shape(), g.shape()));
            }
            let p = e.value.data_mut();
            for i in 0..p.len() {
                let gi = g.data()[i];
                let mi = &mut m.data_mut()[i];
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                let vi = &mut v.data_mut()[i];
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
                let mhat = m.data()[i] / bc1;
                let vhat = v.data()[i] / bc2;
                p[i] -= c.lr * (mhat / (libm::sqrt(vhat) + c.eps) + c.weight_decay * p[i]);
            }
        }
        Ok(())
    }
}
