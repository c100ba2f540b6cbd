use std::collections::BTreeMap;

use crate::error::{NumError, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Named parameter tensors in canonical (lexicographic) order.
pub type ParamStore<F> = BTreeMap<String, Tensor<F>>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct AdamState<F: Real> {
    pub config: AdamConfig,
    step: u64,
    first: BTreeMap<String, Vec<F>>,
    second: BTreeMap<String, Vec<F>>,
}

impl<F: Real> AdamState<F> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, name: &str) -> Option<&[F]> {
        self.first.get(name).map(Vec::as_slice)
    }

    pub fn second_moment(&self, name: &str) -> Option<&[F]> {
        self.second.get(name).map(Vec::as_slice)
    }

    /// Applies one update to every parameter. Gradients are validated before
    /// anything is modified, so a NaN leaves params and state untouched.
    pub fn step(&mut self, params: &mut ParamStore<F>, grads: &ParamStore<F>) -> Result<()> {
        for (name, p) in params.iter() {
            let g = grads.get(name).ok_or_else(|| {
                NumError::Usage(format!("missing gradient for parameter `{name}`"))
            })?;
            if g.shape() != p.shape() {
                return Err(NumError::Dimension {
                    op: "adam_step",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            if let Some(index) = g.data().iter().position(|x| !x.is_finite()) {
                return Err(NumError::NonFiniteGradient {
                    name: name.clone(),
                    index,
                });
            }
        }
        if let Some(name) = grads.keys().find(|k| !params.contains_key(*k)) {
            return Err(NumError::Usage(format!(
                "gradient for unknown parameter `{name}`"
            )));
        }

        self.step += 1;
        let c = self.config;
        let (b1, b2) = (F::from_f64(c.beta1), F::from_f64(c.beta2));
        let bc1 = F::from_f64(1.0 - c.beta1.powi(self.step as i32));
        let bc2 = F::from_f64(1.0 - c.beta2.powi(self.step as i32));
        let lr = F::from_f64(c.lr);
        let eps = F::from_f64(c.eps);
        for (name, p) in params.iter_mut() {
            let g = grads[name].data();
            let m = self
                .first
                .entry(name.clone())
                .or_insert_with(|| vec![F::zero(); g.len()]);
            let v = self
                .second
                .entry(name.clone())
                .or_insert_with(|| vec![F::zero(); g.len()]);
            for (((w, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g)
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = b1 * *mi + (F::one() - b1) * gi;
                *vi = b2 * *vi + (F::one() - b2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
