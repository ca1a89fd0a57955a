//! Adam with L2 weight decay folded into the gradient and one learning rate
//! per parameter group.

use crate::archive::Archive;
use crate::autograd::Gradients;
use crate::error::{DemoError, Result};
use crate::params::{Group, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        Adam {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update. `lr` gives the encoder and module learning rates.
    /// Parameters without a gradient are left untouched.
    pub fn update(&mut self, store: &mut ParamStore, grads: &Gradients, lr: LearningRates) {
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let ids: Vec<_> = store.iter().filter(|(_, p)| p.trainable).map(|(id, p)| (id, p.group)).collect();
        for (id, group) in ids {
            let Some(grad) = grads.param(id) else { continue };
            let rate = match group {
                Group::Encoder => lr.encoder,
                Group::Module => lr.module,
            };
            let i = id.index();
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let w = store.value_mut(id).data_mut();
            for k in 0..w.len() {
                let gk = grad.data()[k] + c.weight_decay * w[k];
                m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * gk;
                v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * gk * gk;
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                w[k] -= rate * mhat / (vhat.sqrt() + c.eps);
            }
        }
    }

    pub fn write_state(&self, store: &ParamStore, a: &mut Archive) {
        a.meta.insert("adam_step".into(), self.step.to_string());
        for (id, p) in store.iter().filter(|(_, p)| p.trainable) {
            a.insert_tensor(format!("adam_m/{}", p.name), &self.m[id.index()]);
            a.insert_tensor(format!("adam_v/{}", p.name), &self.v[id.index()]);
        }
    }

    pub fn read_state(store: &ParamStore, config: AdamConfig, a: &Archive) -> Result<Self> {
        let mut adam = Adam::new(store, config);
        adam.step = a
            .meta
            .get("adam_step")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| DemoError::Checkpoint("archive has no optimizer step".into()))?;
        for (id, p) in store.iter().filter(|(_, p)| p.trainable) {
            let m = a.tensor(&format!("adam_m/{}", p.name))?;
            let v = a.tensor(&format!("adam_v/{}", p.name))?;
            if m.shape() != p.value.shape() || v.shape() != p.value.shape() {
                return Err(DemoError::Checkpoint(format!("optimizer state for {} has wrong shape", p.name)));
            }
            adam.m[id.index()] = m;
            adam.v[id.index()] = v;
        }
        Ok(adam)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LearningRates {
    pub encoder: f64,
    pub module: f64,
}
