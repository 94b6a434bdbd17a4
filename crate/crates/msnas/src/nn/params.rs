//! Named parameter storage shared by the supernet and the metric predictor.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Convolution / linear weights (weight decay applies).
    Weight,
    /// Bias vectors (no weight decay).
    Bias,
    /// Normalization affine parameters (no weight decay).
    Norm,
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor,
    pub grad: Tensor,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Tensor, kind: ParamKind) -> usize {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter name {name}"
        );
        let grad = Tensor::zeros(value.shape());
        self.params.push(Param { name: name.to_string(), kind, value, grad });
        let id = self.params.len() - 1;
        self.by_name.insert(name.to_string(), id);
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn value(&self, id: usize) -> &Tensor {
        &self.params[id].value
    }

    pub fn param(&self, id: usize) -> &Param {
        &self.params[id]
    }

    pub fn param_mut(&mut self, id: usize) -> &mut Param {
        &mut self.params[id]
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn id_of(&self, name: &str) -> Option<usize> {
        self.by_name.get(name).copied()
    }

    pub fn set_value(&mut self, id: usize, value: Tensor) {
        assert_eq!(self.params[id].value.shape(), value.shape());
        self.params[id].value = value;
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            for g in p.grad.data_mut() {
                *g = 0.0;
            }
        }
    }

    pub fn accumulate_grad(&mut self, id: usize, g: &Tensor) {
        let grad = &mut self.params[id].grad;
        assert_eq!(grad.shape(), g.shape());
        for (a, b) in grad.data_mut().iter_mut().zip(g.data()) {
            *a += b;
        }
    }

    pub fn total_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

/// Gaussian tensor via Box-Muller; deterministic under the rng seed.
pub fn randn(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let u1: f64 = rng.gen_range(1e-12..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        })
        .collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// Identity matrix of size `p`.
pub fn identity(p: usize) -> Tensor {
    let mut m = Tensor::zeros(&[p, p]);
    for i in 0..p {
        m.data_mut()[i * p + i] = 1.0;
    }
    m
}
