//! Adam with bias-corrected moments.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::params::{ParamId, ParamStore};
use crate::numerics::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Moments<T> {
    pub m: Tensor<T>,
    pub v: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct Adam<T: Real = f32> {
    pub config: AdamConfig,
    /// Completed steps; drives bias correction.
    pub t: u64,
    pub state: BTreeMap<ParamId, Moments<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            t: 0,
            state: BTreeMap::new(),
        }
    }

    /// Drops moments of parameters that are no longer trainable.
    pub fn retain_trainable(&mut self, store: &ParamStore<T>) {
        self.state.retain(|&id, _| store.is_trainable(id));
    }

    /// One update of every parameter in `grads`. Gradients are checked for
    /// finiteness before anything is modified.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[(ParamId, Tensor<T>)]) -> Result<()> {
        for (id, g) in grads {
            if !g.all_finite() {
                return Err(Error::Numeric(format!("non-finite gradient for parameter {}", store.name(*id))));
            }
            if g.shape() != store.value(*id).shape() {
                return Err(Error::shape("adam_step", g.shape(), store.value(*id).shape()));
            }
        }
        self.t += 1;
        let c = self.config;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (one_b1, one_b2) = (T::lit(1.0 - c.beta1), T::lit(1.0 - c.beta2));
        let bc1 = T::lit(1.0 - c.beta1.powf(self.t as f64));
        let bc2 = T::lit(1.0 - c.beta2.powf(self.t as f64));
        let (lr, eps) = (T::lit(c.lr), T::lit(c.eps));
        for (id, g) in grads {
            let st = self.state.entry(*id).or_insert_with(|| Moments {
                m: Tensor::zeros(g.shape()),
                v: Tensor::zeros(g.shape()),
            });
            let p = store.value_mut(*id).data_mut();
            let (m, v) = (st.m.data_mut(), st.v.data_mut());
            for (i, &gi) in g.data().iter().enumerate() {
                m[i] = b1 * m[i] + one_b1 * gi;
                v[i] = b2 * v[i] + one_b2 * gi * gi;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}
