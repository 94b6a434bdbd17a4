//! Reverse-mode autodiff over a flat op tape.
//!
//! Values are eager tensors; each op records enough to replay its backward.
//! With gradients disabled the tape still stores values (stage caches point
//! at node ids) but skips backward bookkeeping.

use std::collections::HashMap;

use super::ops;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

enum Op {
    Leaf { param: Option<usize> },
    Conv2d { x: NodeId, w: NodeId, stride: usize, pad: usize },
    DwConv2d { x: NodeId, w: NodeId, stride: usize, pad: usize },
    Add { a: NodeId, b: NodeId },
    Relu { x: NodeId },
    SliceNorm { x: NodeId, gamma: NodeId, beta: NodeId, xhat: Tensor, inv_std: Vec<f64> },
    AvgPool { x: NodeId, stride: usize },
    GlobalAvgPool { x: NodeId },
    Linear { x: NodeId, w: NodeId, b: NodeId },
    IndexSelect { x: NodeId, axis: usize, idx: Vec<usize> },
    CropCenter { x: NodeId, target: usize },
    Reshape { x: NodeId },
    MatTransform { x: NodeId, m: NodeId },
    SoftmaxCe { logits: NodeId, labels: Vec<usize>, probs: Tensor },
    KdKl { student: NodeId, teacher: NodeId, tau: f64 },
    Rmse { pred: NodeId, target: Vec<f64>, value: f64 },
    Scale { x: NodeId, c: f64 },
    SumScalars { xs: Vec<NodeId> },
}

struct Node {
    value: Tensor,
    op: Op,
}

pub struct Tape {
    nodes: Vec<Node>,
    grad_enabled: bool,
    leaf_of_param: HashMap<usize, NodeId>,
}

impl Tape {
    pub fn new(grad_enabled: bool) -> Self {
        Tape { nodes: Vec::new(), grad_enabled, leaf_of_param: HashMap::new() }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf { param: None })
    }

    /// Leaf for a parameter; memoized so each parameter has one leaf per tape.
    pub fn param_leaf(&mut self, param_id: usize, value: Tensor) -> NodeId {
        if let Some(&id) = self.leaf_of_param.get(&param_id) {
            return id;
        }
        let id = self.push(value, Op::Leaf { param: Some(param_id) });
        self.leaf_of_param.insert(param_id, id);
        id
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, stride: usize, pad: usize) -> NodeId {
        let y = ops::conv2d_fwd(self.value(x), self.value(w), stride, pad);
        self.push(y, Op::Conv2d { x, w, stride, pad })
    }

    pub fn dwconv2d(&mut self, x: NodeId, w: NodeId, stride: usize, pad: usize) -> NodeId {
        let y = ops::dwconv2d_fwd(self.value(x), self.value(w), stride, pad);
        self.push(y, Op::DwConv2d { x, w, stride, pad })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let y = ops::add_fwd(self.value(a), self.value(b));
        self.push(y, Op::Add { a, b })
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let y = ops::relu_fwd(self.value(x));
        self.push(y, Op::Relu { x })
    }

    pub fn slice_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> NodeId {
        let (y, xhat, inv_std) =
            ops::slice_norm_fwd(self.value(x), self.value(gamma), self.value(beta), eps);
        let (xhat, inv_std) = if self.grad_enabled {
            (xhat, inv_std)
        } else {
            (Tensor::zeros(&[0]), Vec::new())
        };
        self.push(y, Op::SliceNorm { x, gamma, beta, xhat, inv_std })
    }

    pub fn avg_pool(&mut self, x: NodeId, stride: usize) -> NodeId {
        let y = ops::avg_pool_fwd(self.value(x), stride);
        self.push(y, Op::AvgPool { x, stride })
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> NodeId {
        let y = ops::global_avg_pool_fwd(self.value(x));
        self.push(y, Op::GlobalAvgPool { x })
    }

    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let y = ops::linear_fwd(self.value(x), self.value(w), self.value(b));
        self.push(y, Op::Linear { x, w, b })
    }

    pub fn index_select(&mut self, x: NodeId, axis: usize, idx: &[usize]) -> NodeId {
        let y = ops::index_select_fwd(self.value(x), axis, idx);
        self.push(y, Op::IndexSelect { x, axis, idx: idx.to_vec() })
    }

    pub fn crop_center(&mut self, x: NodeId, target: usize) -> NodeId {
        let y = ops::crop_center_fwd(self.value(x), target);
        self.push(y, Op::CropCenter { x, target })
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> NodeId {
        let y = self.value(x).reshaped(shape).expect("reshape element count");
        self.push(y, Op::Reshape { x })
    }

    pub fn mat_transform(&mut self, x: NodeId, m: NodeId) -> NodeId {
        let y = ops::mat_transform_fwd(self.value(x), self.value(m));
        self.push(y, Op::MatTransform { x, m })
    }

    pub fn softmax_ce(&mut self, logits: NodeId, labels: &[usize]) -> NodeId {
        let (loss, probs) = ops::softmax_ce_fwd(self.value(logits), labels);
        self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCe { logits, labels: labels.to_vec(), probs },
        )
    }

    /// KL distillation term; gradient flows only into `student`.
    pub fn kd_kl(&mut self, student: NodeId, teacher: NodeId, tau: f64) -> NodeId {
        let loss = ops::kd_kl_fwd(self.value(student), self.value(teacher), tau);
        self.push(Tensor::scalar(loss), Op::KdKl { student, teacher, tau })
    }

    pub fn rmse(&mut self, pred: NodeId, target: &[f64]) -> NodeId {
        let value = ops::rmse_fwd(self.value(pred), target);
        self.push(Tensor::scalar(value), Op::Rmse { pred, target: target.to_vec(), value })
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let mut y = self.value(x).clone();
        for v in y.data_mut() {
            *v *= c;
        }
        self.push(y, Op::Scale { x, c })
    }

    pub fn sum_scalars(&mut self, xs: &[NodeId]) -> NodeId {
        let total = xs.iter().map(|&id| self.value(id).item()).sum();
        self.push(Tensor::scalar(total), Op::SumScalars { xs: xs.to_vec() })
    }

    /// Run backward from a scalar loss node. Returns gradients of parameter
    /// leaves as `(param_id, grad)` pairs.
    pub fn backward(&self, loss: NodeId) -> Vec<(usize, Tensor)> {
        assert!(self.grad_enabled, "backward on a no-grad tape");
        assert_eq!(self.value(loss).len(), 1, "loss must be scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Leaf { param } => {
                    if param.is_some() {
                        grads[i] = Some(dy);
                    }
                    continue;
                }
                Op::Conv2d { x, w, stride, pad } => {
                    let (dx, dw) =
                        ops::conv2d_bwd(self.value(*x), self.value(*w), *stride, *pad, &dy);
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *w, dw);
                }
                Op::DwConv2d { x, w, stride, pad } => {
                    let (dx, dw) =
                        ops::dwconv2d_bwd(self.value(*x), self.value(*w), *stride, *pad, &dy);
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *w, dw);
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads, *a, dy.clone());
                    accumulate(&mut grads, *b, dy);
                }
                Op::Relu { x } => {
                    let dx = ops::relu_bwd(self.value(*x), &dy);
                    accumulate(&mut grads, *x, dx);
                }
                Op::SliceNorm { x, gamma, beta, xhat, inv_std } => {
                    let (dx, dg, db) = ops::slice_norm_bwd(xhat, inv_std, self.value(*gamma), &dy);
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *gamma, dg);
                    accumulate(&mut grads, *beta, db);
                }
                Op::AvgPool { x, stride } => {
                    let dx = ops::avg_pool_bwd(self.value(*x).shape(), *stride, &dy);
                    accumulate(&mut grads, *x, dx);
                }
                Op::GlobalAvgPool { x } => {
                    let dx = ops::global_avg_pool_bwd(self.value(*x).shape(), &dy);
                    accumulate(&mut grads, *x, dx);
                }
                Op::Linear { x, w, b } => {
                    let (dx, dw, db) = ops::linear_bwd(self.value(*x), self.value(*w), &dy);
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *w, dw);
                    accumulate(&mut grads, *b, db);
                }
                Op::IndexSelect { x, axis, idx } => {
                    let dx = ops::index_select_bwd(self.value(*x).shape(), *axis, idx, &dy);
                    accumulate(&mut grads, *x, dx);
                }
                Op::CropCenter { x, target } => {
                    let dx = ops::crop_center_bwd(self.value(*x).shape(), *target, &dy);
                    accumulate(&mut grads, *x, dx);
                }
                Op::Reshape { x } => {
                    let dx = dy.reshaped(self.value(*x).shape()).expect("reshape grad");
                    accumulate(&mut grads, *x, dx);
                }
                Op::MatTransform { x, m } => {
                    let (dx, dm) = ops::mat_transform_bwd(self.value(*x), self.value(*m), &dy);
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *m, dm);
                }
                Op::SoftmaxCe { logits, labels, probs } => {
                    let dl = ops::softmax_ce_bwd(probs, labels, dy.item());
                    accumulate(&mut grads, *logits, dl);
                }
                Op::KdKl { student, teacher, tau } => {
                    let ds =
                        ops::kd_kl_bwd(self.value(*student), self.value(*teacher), *tau, dy.item());
                    accumulate(&mut grads, *student, ds);
                }
                Op::Rmse { pred, target, value } => {
                    let dp = ops::rmse_bwd(self.value(*pred), target, *value, dy.item());
                    accumulate(&mut grads, *pred, dp);
                }
                Op::Scale { x, c } => {
                    let mut dx = dy;
                    for v in dx.data_mut() {
                        *v *= c;
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::SumScalars { xs } => {
                    for &xid in xs {
                        accumulate(&mut grads, xid, dy.clone());
                    }
                }
            }
        }

        let mut out = Vec::new();
        for (&param_id, &leaf) in &self.leaf_of_param {
            if let Some(g) = grads[leaf.0].take() {
                out.push((param_id, g));
            }
        }
        out.sort_by_key(|(p, _)| *p);
        out
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
    match &mut grads[id.0] {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        slot => *slot = Some(g),
    }
}
