use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Adam state for one parameter tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Adam {
    /// Defaults `lr = 1e-4`, `beta = (0.9, 0.999)`, `eps = 1e-8`.
    pub fn new(len: usize) -> Self {
        Self::with_hyper(len, 1e-4, 0.9, 0.999, 1e-8)
    }

    pub fn with_hyper(len: usize, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }

    /// One bias-corrected update. A non-finite gradient is rejected before
    /// any state changes; `name` identifies the parameter in the error.
    pub fn step(&mut self, name: &str, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::InvalidArgument(format!(
                "adam state for {name} holds {} values, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::Divergence(format!(
                "gradient of {name}[{i}] is {}",
                grads[i]
            )));
        }
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
        }
        Ok(())
    }
}
