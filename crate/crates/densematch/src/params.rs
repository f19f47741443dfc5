//! Named learnable arrays with gradient slots.

use std::collections::HashMap;

use rand::prelude::*;
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::tensor::{Array, Tape, Value};

/// One learnable array.
#[derive(Debug, Clone)]
pub struct Param {
    pub value: Array,
    pub grad: Option<Vec<f64>>,
}

/// Registry of learnable parameters in deterministic (insertion) order.
#[derive(Debug, Clone, Default)]
pub struct ParameterStore {
    names: Vec<String>,
    by_name: HashMap<String, Param>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, value: Array) -> Result<()> {
        if self.by_name.contains_key(name) {
            return Err(Error::Contract(format!(
                "parameter {name:?} registered twice"
            )));
        }
        self.names.push(name.to_string());
        self.by_name.insert(name.to_string(), Param { value, grad: None });
        Ok(())
    }

    /// Register with values drawn uniformly from [-scale, scale].
    pub fn register_uniform(
        &mut self,
        name: &str,
        shape: &[usize],
        scale: f64,
        rng: &mut ChaCha12Rng,
    ) -> Result<()> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n)
            .map(|_| (rng.random::<f64>() * 2.0 - 1.0) * scale)
            .collect();
        self.register(name, Array::new(shape.to_vec(), data)?)
    }

    pub fn register_const(&mut self, name: &str, shape: &[usize], fill: f64) -> Result<()> {
        let n: usize = shape.iter().product();
        self.register(name, Array::new(shape.to_vec(), vec![fill; n])?)
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.by_name
            .get(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name:?}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param> {
        self.by_name
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name:?}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.by_name.contains_key(name)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Total scalar count across all parameters.
    pub fn scalar_count(&self) -> usize {
        self.names
            .iter()
            .map(|n| self.by_name[n].value.len())
            .sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.names.iter().map(|n| (n.as_str(), &self.by_name[n]))
    }

    pub fn zero_grads(&mut self) {
        for p in self.by_name.values_mut() {
            p.grad = None;
        }
    }

    /// Give parameters that received no gradient an explicit zero gradient,
    /// so an optimizer step treats them as unchanged rather than missing.
    pub fn fill_missing_grads(&mut self) {
        for p in self.by_name.values_mut() {
            if p.grad.is_none() {
                p.grad = Some(vec![0.0; p.value.len()]);
            }
        }
    }

    /// Put every parameter on a tape as a leaf, returning name -> handle.
    pub fn inject_all(&self, tape: &mut Tape) -> Result<HashMap<String, Value>> {
        let mut out = HashMap::new();
        for name in &self.names {
            let v = tape.input(self.by_name[name].value.clone())?;
            out.insert(name.clone(), v);
        }
        Ok(out)
    }

    /// Accumulate the gradients of the given tape handles into the store.
    pub fn accumulate_grads(
        &mut self,
        handles: &HashMap<String, Value>,
        tape: &Tape,
        grads: &crate::tensor::GradStore,
    ) -> Result<()> {
        let _ = tape;
        for (name, &v) in handles {
            let p = self
                .by_name
                .get_mut(name)
                .ok_or_else(|| Error::Contract(format!("unknown parameter {name:?}")))?;
            if let Some(g) = grads.get(v) {
                let slot = p.grad.get_or_insert_with(|| vec![0.0; p.value.len()]);
                for (d, x) in slot.iter_mut().zip(g) {
                    *d += x;
                }
            }
        }
        Ok(())
    }
}
