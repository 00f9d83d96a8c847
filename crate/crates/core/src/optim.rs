use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, ParamStore};
use crate::tensor::Tensor;
use crate::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam with bias correction. [`Adam::step`] descends the given gradients.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    config: AdamConfig,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    t: i32,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig, store: &ParamStore<T>) -> Self {
        let zeros: Vec<Tensor<T>> = store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        Adam { config, m: zeros.clone(), v: zeros, t: 0 }
    }

    pub fn config(&self) -> AdamConfig {
        self.config
    }

    pub fn steps_taken(&self) -> i32 {
        self.t
    }

    /// One update of every parameter whose `trainable` entry is true (all when `None`).
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>, trainable: Option<&[bool]>) {
        self.t += 1;
        let c = self.config;
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let bc1 = T::one() - T::of(c.beta1.powi(self.t));
        let bc2 = T::one() - T::of(c.beta2.powi(self.t));
        let (lr, eps) = (T::of(c.lr), T::of(c.eps));
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        for id in ids {
            let i = id.index();
            if trainable.is_some_and(|mask| !mask[i]) {
                continue;
            }
            let g = grads.get(id).data();
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let p = store.value_mut(id).data_mut();
            for j in 0..p.len() {
                m[j] = b1 * m[j] + (T::one() - b1) * g[j];
                v[j] = b2 * v[j] + (T::one() - b2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                p[j] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}
