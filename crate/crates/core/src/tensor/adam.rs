use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moment buffers are allocated on the first step.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step_count: u64,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step_count: 0,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Update `params` in place. `names` label parameters in error messages.
    ///
    /// All gradients are validated before any parameter is touched.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor], names: &[&str]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::dim(
                "adam_step",
                format!("{} params vs {} grads", params.len(), grads.len()),
            ));
        }
        for (k, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(Error::dim(
                    "adam_step",
                    format!("param {:?} vs grad {:?}", p.shape(), g.shape()),
                ));
            }
            if !g.all_finite() {
                let name = names.get(k).copied().unwrap_or("?");
                return Err(Error::NonFiniteGradient(name.to_string()));
            }
        }
        if self.first_moment.is_empty() {
            self.first_moment = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.second_moment = params.iter().map(|p| vec![0.0; p.len()]).collect();
        } else if self.first_moment.len() != params.len()
            || self
                .first_moment
                .iter()
                .zip(params.iter())
                .any(|(m, p)| m.len() != p.len())
        {
            return Err(Error::dim("adam_step", "parameter set changed between steps"));
        }
        self.step_count += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step_count as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = &mut self.first_moment[k];
            let v = &mut self.second_moment[k];
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
