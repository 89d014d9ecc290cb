//! AdamW with decoupled weight decay and the cosine learning-rate schedule.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Parameter, Tensor};

/// base_lr * 0.5 * (1 + cos(pi * step / total)); monotone non-increasing.
pub fn cosine_lr(step: usize, total: usize, base_lr: f64) -> Result<f64> {
    if total == 0 {
        return Err(Error::usage("cosine_lr: total steps must be positive"));
    }
    if step > total {
        return Err(Error::usage(format!("cosine_lr: step {step} > total {total}")));
    }
    Ok(base_lr * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos()))
}

/// Optimizer state: per-parameter moment buffers exist only for trainable
/// parameters; frozen parameters are never touched.
pub struct AdamW<S: Scalar = f64> {
    pub base_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub total_steps: usize,
    step: usize,
    moments: BTreeMap<String, (Vec<S>, Vec<S>)>,
}

impl<S: Scalar> AdamW<S> {
    pub fn new(base_lr: f64, weight_decay: f64, total_steps: usize) -> Self {
        AdamW {
            base_lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            total_steps,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// One update with the cosine-scheduled learning rate. Returns the rate
    /// used. Every trainable parameter must have a gradient; frozen
    /// parameters are skipped even when a gradient is present.
    pub fn step(
        &mut self,
        params: &mut [&mut Parameter<S>],
        grads: &BTreeMap<String, Tensor<S>>,
    ) -> Result<f64> {
        let lr = cosine_lr(self.step, self.total_steps, self.base_lr)?;
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (S::of(self.beta1), S::of(self.beta2));
        let (one_m_b1, one_m_b2) = (S::of(1.0 - self.beta1), S::of(1.0 - self.beta2));
        let eps = S::of(self.eps);
        let lr_s = S::of(lr);
        let decay = S::of(lr * self.weight_decay);

        for p in params.iter_mut() {
            if p.frozen {
                continue;
            }
            let g = grads.get(&p.name).ok_or_else(|| {
                Error::usage(format!("missing gradient for trainable parameter '{}'", p.name))
            })?;
            if g.shape() != p.value.shape() {
                return Err(Error::shape("adamw_step", format!("grad shape for '{}'", p.name)));
            }
            let n = p.value.numel();
            let (m, v) = self
                .moments
                .entry(p.name.clone())
                .or_insert_with(|| (vec![S::zero(); n], vec![S::zero(); n]));
            let mut new = p.value.data().to_vec();
            for i in 0..n {
                let gi = g.data()[i];
                m[i] = b1 * m[i] + one_m_b1 * gi;
                v[i] = b2 * v[i] + one_m_b2 * gi * gi;
                let mhat = m[i] / S::of(bc1);
                let vhat = v[i] / S::of(bc2);
                let w = new[i];
                new[i] = w - decay * w - lr_s * mhat / (vhat.sqrt() + eps);
            }
            p.value = Tensor::new(p.value.shape().to_vec(), new)?;
            p.value.check_finite("adamw_step")?;
        }
        Ok(lr)
    }

    pub fn has_moments_for(&self, name: &str) -> bool {
        self.moments.contains_key(name)
    }
}
