//! AdamW with decoupled weight decay, plus global-norm gradient clipping.

use std::collections::HashMap;

use super::{ParamId, ParamStore, Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First/second moment state per parameter. Only trainable parameters ever
/// get an entry.
pub struct AdamW<T: Scalar> {
    pub config: AdamWConfig,
    steps: u64,
    moments: HashMap<usize, (Vec<T>, Vec<T>)>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW {
            config,
            steps: 0,
            moments: HashMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.steps
    }

    /// Apply one update over `(id, grad)` pairs at learning rate `lr`.
    /// Frozen parameters are rejected outright rather than silently skipped.
    pub fn step(
        &mut self,
        store: &mut ParamStore<T>,
        grads: &[(ParamId, Tensor<T>)],
        lr: f64,
    ) -> Result<()> {
        if lr <= 0.0 {
            return Err(Error::config(format!("learning rate must be > 0, got {lr}")));
        }
        self.steps += 1;
        let t = self.steps as i32;
        let b1 = T::from_f64(self.config.beta1);
        let b2 = T::from_f64(self.config.beta2);
        let eps = T::from_f64(self.config.eps);
        let wd = T::from_f64(self.config.weight_decay);
        let lr_t = T::from_f64(lr);
        let bc1 = T::one() - b1.powi(t);
        let bc2 = T::one() - b2.powi(t);
        for (id, grad) in grads {
            let param = store.get_mut(*id);
            if !param.trainable {
                return Err(Error::Contract(format!(
                    "optimizer step on frozen parameter `{}`",
                    param.name
                )));
            }
            if grad.shape() != param.tensor.shape() {
                return Err(Error::ShapeMismatch {
                    op: "adamw_step",
                    lhs: param.tensor.shape().to_vec(),
                    rhs: grad.shape().to_vec(),
                });
            }
            let n = grad.numel();
            let (m, v) = self
                .moments
                .entry(id.0)
                .or_insert_with(|| (vec![T::zero(); n], vec![T::zero(); n]));
            let w = param.tensor.data_mut();
            let g = grad.data();
            for i in 0..n {
                m[i] = b1 * m[i] + (T::one() - b1) * g[i];
                v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                w[i] = w[i] - lr_t * (m_hat / (v_hat.sqrt() + eps) + wd * w[i]);
            }
        }
        Ok(())
    }

    /// Export moment tensors for checkpointing, keyed by parameter name.
    pub fn export_state(&self, store: &ParamStore<T>) -> Vec<(String, Tensor<T>, Tensor<T>)> {
        let mut out = Vec::new();
        for (id, p) in store.iter() {
            if let Some((m, v)) = self.moments.get(&id.0) {
                let shape = p.tensor.shape();
                out.push((
                    p.name.clone(),
                    Tensor::from_vec(shape, m.clone()).unwrap(),
                    Tensor::from_vec(shape, v.clone()).unwrap(),
                ));
            }
        }
        out
    }

    pub fn import_state(
        &mut self,
        store: &ParamStore<T>,
        steps: u64,
        entries: &[(String, Tensor<T>, Tensor<T>)],
    ) -> Result<()> {
        self.steps = steps;
        self.moments.clear();
        for (name, m, v) in entries {
            let (id, p) = store
                .by_name(name)
                .ok_or_else(|| Error::Format(format!("optimizer state for unknown param `{name}`")))?;
            if m.shape() != p.tensor.shape() || v.shape() != p.tensor.shape() {
                return Err(Error::Format(format!("optimizer state shape mismatch for `{name}`")));
            }
            self.moments
                .insert(id.0, (m.data().to_vec(), v.data().to_vec()));
        }
        Ok(())
    }
}

/// Scale gradients in place so their global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm<T: Scalar>(grads: &mut [(ParamId, Tensor<T>)], max_norm: f64) -> f64 {
    let mut sq = 0.0f64;
    for (_, g) in grads.iter() {
        for &v in g.data() {
            sq += v.to_f64() * v.to_f64();
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = T::from_f64(max_norm / norm);
        for (_, g) in grads.iter_mut() {
            for v in g.data_mut() {
                *v = *v * scale;
            }
        }
    }
    norm
}
