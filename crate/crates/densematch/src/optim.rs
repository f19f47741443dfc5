//! AdamW with decoupled weight decay.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::ParameterStore;

#[derive(Debug, Clone, Copy)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    pub step_count: u64,
    /// First/second moment estimates keyed by parameter name.
    pub moments: HashMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        AdamW {
            cfg,
            step_count: 0,
            moments: HashMap::new(),
        }
    }

    /// One optimization step over every parameter in the store.
    /// Weight decay is decoupled: applied directly to the weights,
    /// not routed through the moment estimates.
    pub fn step(&mut self, params: &mut ParameterStore) -> Result<()> {
        self.step_count += 1;
        let t = self.step_count as i32;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let names: Vec<String> = params.names().to_vec();
        for name in names {
            let p = params.get_mut(&name)?;
            let grad = p
                .grad
                .as_ref()
                .ok_or_else(|| Error::Contract(format!("missing gradient for parameter {name:?}")))?
                .clone();
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; grad.len()], vec![0.0; grad.len()]));
            for i in 0..grad.len() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * grad[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * grad[i] * grad[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                let w = &mut p.value.data[i];
                *w -= c.lr * c.weight_decay * *w;
                *w -= c.lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}
