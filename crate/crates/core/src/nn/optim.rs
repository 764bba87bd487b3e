use super::params::ParamStore;
use crate::error::{Error, Result};

/// Adaptive-moment optimizer state (Adam with bias correction).
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let zeros = || store.ids().map(|id| vec![0.0; store.value(id).len()]).collect();
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update from the accumulated gradients, then zeroes them.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        if !store.has_grads() {
            return Err(Error::contract("optimizer step without populated gradients"));
        }
        if self.m.len() != store.len() {
            return Err(Error::contract("optimizer state does not match parameter store"));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for ((value, grad), (m, v)) in store.entries_mut().zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for (((p, &g), mi), vi) in value.data_mut().iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (1.0 - b1) * g;
                *vi = b2 * *vi + (1.0 - b2) * g * g;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *p -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        store.zero_grad();
        Ok(())
    }
}
