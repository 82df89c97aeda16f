use super::params::ParamStore;
use crate::error::{bail, Result};
use crate::real::Real;
use crate::tensor::Tensor;
use alloc::vec::Vec;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam with bias correction; one moment pair per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T: Real = f32> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(store: &ParamStore<T>, config: AdamConfig) -> Self {
        let zeros: Vec<Tensor<T>> = store.values().iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self { config, step: 0, m: zeros.clone(), v: zeros }
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Tensor<T>]) -> Result<()> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            bail!(Dimension, "adam: {} gradients for {} parameters ({} moments)", grads.len(), store.len(), self.m.len());
        }
        for (k, (p, gr)) in store.values().iter().zip(grads).enumerate() {
            if p.shape() != gr.shape() || self.m[k].shape() != p.shape() {
                bail!(Dimension, "adam: parameter {:?} vs gradient {:?}", p.shape(), gr.shape());
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - libm::pow(c.beta1, t as f64);
        let bc2 = 1.0 - libm::pow(c.beta2, t as f64);
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        for (k, p) in store.values_mut().iter_mut().enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (((w, &gv), mm), vv) in p.data_mut().iter_mut().zip(grads[k].data()).zip(m.data_mut()).zip(v.data_mut()) {
                *mm = b1 * *mm + (T::one() - b1) * gv;
                *vv = b2 * *vv + (T::one() - b2) * gv * gv;
                let mhat = mm.as_f64() / bc1;
                let vhat = vv.as_f64() / bc2;
                *w -= T::of(c.lr * mhat / (libm::sqrt(vhat) + c.eps));
            }
        }
        Ok(())
    }
}
