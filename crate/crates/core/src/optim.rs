//! Adam with bias correction over the learnable entries of a [`ParamStore`].

use serde::{Deserialize, Serialize};

use crate::error::{DfnError, Result};
use crate::nn::ParamStore;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self::with_lr(1e-4)
    }
}

/// First/second moments per learnable tensor, in manifest order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(store: &ParamStore<T>, config: AdamConfig) -> Self {
        let zeros: Vec<Vec<T>> = store
            .learnable()
            .map(|(_, e)| vec![T::zero(); e.value.len()])
            .collect();
        AdamState {
            config,
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    /// One bias-corrected update of every learnable tensor:
    /// `θ ← θ − lr·m̂/(√v̂ + eps)`.
    pub fn step(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        let learnable: Vec<_> = store.learnable().map(|(id, _)| id).collect();
        if learnable.len() != self.m.len() {
            return Err(DfnError::invalid(
                "adam",
                format!("{} moment slots for {} learnable tensors", self.m.len(), learnable.len()),
            ));
        }
        for (slot, id) in learnable.iter().enumerate() {
            let e = store.entry(*id);
            if e.value.grad().is_none() {
                return Err(DfnError::MissingGradient(e.name.clone()));
            }
            if self.m[slot].len() != e.value.len() {
                return Err(DfnError::invalid(
                    "adam",
                    format!("moment size {} for `{}` of {} elements", self.m[slot].len(), e.name, e.value.len()),
                ));
            }
        }
        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let b1 = T::from_f64_lossy(c.beta1);
        let b2 = T::from_f64_lossy(c.beta2);
        let one_b1 = T::one() - b1;
        let one_b2 = T::one() - b2;
        let corr1 = T::one() - b1.powi(t);
        let corr2 = T::one() - b2.powi(t);
        let lr = T::from_f64_lossy(c.lr);
        let eps = T::from_f64_lossy(c.eps);
        for (slot, id) in learnable.into_iter().enumerate() {
            let value = store.value_mut(id);
            let grad = value.grad().expect("checked above").to_vec();
            let (m, v) = (&mut self.m[slot], &mut self.v[slot]);
            for (i, theta) in value.data_mut().iter_mut().enumerate() {
                let g = grad[i];
                m[i] = b1 * m[i] + one_b1 * g;
                v[i] = b2 * v[i] + one_b2 * g * g;
                let m_hat = m[i] / corr1;
                let v_hat = v[i] / corr2;
                *theta = *theta - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
