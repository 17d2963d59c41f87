//! Adam with bias correction.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::params::{GradBuffer, ParamSet};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment buffers for every parameter of one [`ParamSet`].
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &ParamSet, config: AdamConfig) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, _, t)| vec![0.0; t.len()]).collect();
        Adam {
            config,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.first, &self.second)
    }

    /// Restores moment buffers and step counter, e.g. from a checkpoint.
    pub fn restore(&mut self, step: u64, first: Vec<Vec<f64>>, second: Vec<Vec<f64>>) -> Result<()> {
        let congruent = |b: &[Vec<f64>]| {
            b.len() == self.first.len() && b.iter().zip(&self.first).all(|(x, y)| x.len() == y.len())
        };
        if !congruent(&first) || !congruent(&second) {
            return Err(Error::contract("adam moments are not congruent with the parameters"));
        }
        self.step = step;
        self.first = first;
        self.second = second;
        Ok(())
    }

    /// Applies one update and zeroes `grads`. Every parameter needs a gradient.
    pub fn step(&mut self, params: &mut ParamSet, grads: &mut GradBuffer) -> Result<()> {
        if let Some(id) = params.ids().find(|&id| grads.get(id).is_none()) {
            return Err(Error::contract(alloc::format!(
                "adam step: no gradient for `{}`",
                params.name(id)
            )));
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - libm::pow(beta1, self.step as f64);
        let bc2 = 1.0 - libm::pow(beta2, self.step as f64);
        for id in params.ids().collect::<Vec<_>>() {
            let g = grads.get(id).expect("checked above");
            let m = &mut self.first[id.index()];
            let v = &mut self.second[id.index()];
            let p = params.get_mut(id).data_mut();
            for i in 0..p.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= lr * mhat / (libm::sqrt(vhat) + eps);
            }
        }
        grads.zero();
        Ok(())
    }
}
