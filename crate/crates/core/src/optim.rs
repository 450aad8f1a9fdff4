//! SGD with momentum and coupled weight decay.

use msunet_autograd::{Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Kind, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self { lr: 0.01, momentum: 0.9, weight_decay: 1e-4 }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("momentum must be in [0, 1) and weight decay non-negative".into()));
        }
        Ok(())
    }
}

/// Per-parameter momentum buffers, created on the first update.
#[derive(Clone, Debug)]
pub struct Sgd<T: Scalar> {
    pub config: SgdConfig,
    pub buffers: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(config: SgdConfig, store: &ParamStore<T>) -> Self {
        Self { config, buffers: vec![None; store.len()] }
    }

    /// `g += wd * p; b = mu * b + g; p -= lr * b`. Entries without a
    /// gradient (frozen parameters, buffers) are left untouched.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: Vec<Option<Tensor<T>>>, lr: f64) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::Dimension(format!("{} gradients for {} parameters", grads.len(), store.len())));
        }
        let (lr, mu, wd) = (T::lit(lr), T::lit(self.config.momentum), T::lit(self.config.weight_decay));
        for (id, grad) in store.ids().collect::<Vec<_>>().into_iter().zip(grads) {
            let e = store.entry(id);
            let Some(mut g) = grad else { continue };
            if e.kind == Kind::Buffer || !e.trainable {
                continue;
            }
            if g.shape() != e.value.shape() {
                return Err(Error::Dimension(format!("gradient of {} has shape {:?}", e.name, g.shape())));
            }
            if wd != T::zero() {
                for (gv, &pv) in g.data_mut().iter_mut().zip(e.value.data()) {
                    *gv += wd * pv;
                }
            }
            let buf = match self.buffers[id.index()].take() {
                Some(mut b) if mu != T::zero() => {
                    for (bv, &gv) in b.data_mut().iter_mut().zip(g.data()) {
                        *bv = mu * *bv + gv;
                    }
                    b
                }
                _ => g,
            };
            for (pv, &bv) in store.value_mut(id).data_mut().iter_mut().zip(buf.data()) {
                *pv -= lr * bv;
            }
            self.buffers[id.index()] = Some(buf);
        }
        Ok(())
    }
}

/// Polynomial decay `lr * (1 - t / total)^0.9`.
pub fn poly_lr(base: f64, step: usize, total: usize) -> f64 {
    base * (1.0 - step as f64 / total.max(1) as f64).max(0.0).powf(0.9)
}
