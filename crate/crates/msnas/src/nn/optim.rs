//! SGD with Nesterov momentum (supernet training) and Adam (metric predictor).

use super::params::{ParamKind, ParamStore};
use crate::tensor::Tensor;

/// SGD with Nesterov momentum and decoupled-by-kind weight decay: decay is
/// added to the gradient for `Weight` parameters only, never for biases or
/// normalization parameters.
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(store: &ParamStore, momentum: f64, weight_decay: f64) -> Self {
        let velocity = store
            .params()
            .iter()
            .map(|p| Tensor::zeros(p.value.shape()))
            .collect();
        Sgd { momentum, weight_decay, velocity }
    }

    pub fn step(&mut self, store: &mut ParamStore, lr: f64) {
        for id in 0..store.len() {
            let kind = store.param(id).kind;
            let wd = if kind == ParamKind::Weight { self.weight_decay } else { 0.0 };
            let n = store.param(id).value.len();
            for i in 0..n {
                let w = store.param(id).value.data()[i];
                let d = store.param(id).grad.data()[i] + wd * w;
                let v = self.momentum * self.velocity[id].data()[i] + d;
                self.velocity[id].data_mut()[i] = v;
                let update = d + self.momentum * v; // Nesterov lookahead
                store.param_mut(id).value.data_mut()[i] -= lr * update;
            }
        }
    }
}

/// Adam with L2 weight decay folded into the gradient.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64, weight_decay: f64) -> Self {
        let zeros: Vec<Tensor> = store
            .params()
            .iter()
            .map(|p| Tensor::zeros(p.value.shape()))
            .collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore) {
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for id in 0..store.len() {
            let kind = store.param(id).kind;
            let wd = if kind == ParamKind::Weight { self.weight_decay } else { 0.0 };
            let n = store.param(id).value.len();
            for i in 0..n {
                let w = store.param(id).value.data()[i];
                let g = store.param(id).grad.data()[i] + wd * w;
                let m = self.beta1 * self.m[id].data()[i] + (1.0 - self.beta1) * g;
                let v = self.beta2 * self.v[id].data()[i] + (1.0 - self.beta2) * g * g;
                self.m[id].data_mut()[i] = m;
                self.v[id].data_mut()[i] = v;
                let update = (m / b1t) / ((v / b2t).sqrt() + self.eps);
                store.param_mut(id).value.data_mut()[i] -= self.lr * update;
            }
        }
    }
}
