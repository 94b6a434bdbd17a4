//! Weight sources: how a layer's effective tape weights are produced.
//!
//! A materialized sub-network never copies supernet storage; it records which
//! parameter to read and which channel rows/columns or kernel-transform chain
//! to apply. Gradients therefore flow back into the shared parameters.

use std::collections::HashMap;

use super::cache::{LayerKey, StageFeatureCache};
use crate::nn::{NodeId, ParamStore, Tape};
use crate::tensor::Tensor;

/// One crop-and-transform step of the depthwise kernel chain.
#[derive(Debug, Clone)]
pub struct DwStep {
    /// Parameter id of the square transformation matrix (`[k*k, k*k]`).
    pub matrix: usize,
    /// Kernel size produced by this step.
    pub k: usize,
}

#[derive(Debug, Clone)]
pub enum WeightSrc {
    /// Literal tensor (used by standalone layers and tests).
    Raw(Tensor),
    /// A whole stored parameter.
    Param(usize),
    /// Output-channel selection (axis 0) of a stored parameter.
    Rows { id: usize, rows: Vec<usize> },
    /// Input-channel selection (axis 1) of a stored parameter.
    Cols { id: usize, cols: Vec<usize> },
    /// Rows then columns.
    RowsCols { id: usize, rows: Vec<usize>, cols: Vec<usize> },
    /// Depthwise kernels `[C, k0, k0]` cropped and transformed down to the
    /// last step's kernel size.
    DwChain { id: usize, steps: Vec<DwStep> },
}

impl WeightSrc {
    /// Resolve to a plain tensor without touching a tape (no gradients).
    pub fn resolve(&self, store: Option<&ParamStore>) -> Tensor {
        use crate::nn::ops::{crop_center_fwd, index_select_fwd, mat_transform_fwd};
        let param = |id: &usize| store.expect("parameter-backed weight without a store").value(*id);
        match self {
            WeightSrc::Raw(t) => t.clone(),
            WeightSrc::Param(id) => param(id).clone(),
            WeightSrc::Rows { id, rows } => index_select_fwd(param(id), 0, rows),
            WeightSrc::Cols { id, cols } => index_select_fwd(param(id), 1, cols),
            WeightSrc::RowsCols { id, rows, cols } => {
                let r = index_select_fwd(param(id), 0, rows);
                index_select_fwd(&r, 1, cols)
            }
            WeightSrc::DwChain { id, steps } => {
                let mut cur = param(id).clone();
                let channels = cur.shape()[0];
                for step in steps {
                    let k = step.k;
                    let cropped = crop_center_fwd(&cur, k);
                    let flat = cropped.reshaped(&[channels, k * k]).expect("dw chain");
                    let trans = mat_transform_fwd(&flat, param(&step.matrix));
                    cur = trans.reshaped(&[channels, k, k]).expect("dw chain");
                }
                cur
            }
        }
    }

    pub fn materialize(&self, ctx: &mut ExecCtx) -> NodeId {
        match self {
            WeightSrc::Raw(t) => ctx.tape.constant(t.clone()),
            WeightSrc::Param(id) => ctx.leaf(*id),
            WeightSrc::Rows { id, rows } => {
                let leaf = ctx.leaf(*id);
                ctx.tape.index_select(leaf, 0, rows)
            }
            WeightSrc::Cols { id, cols } => {
                let leaf = ctx.leaf(*id);
                ctx.tape.index_select(leaf, 1, cols)
            }
            WeightSrc::RowsCols { id, rows, cols } => {
                let leaf = ctx.leaf(*id);
                let r = ctx.tape.index_select(leaf, 0, rows);
                ctx.tape.index_select(r, 1, cols)
            }
            WeightSrc::DwChain { id, steps } => {
                let mut node = ctx.leaf(*id);
                let channels = ctx.tape.value(node).shape()[0];
                for step in steps {
                    let m = ctx.leaf(step.matrix);
                    let k = step.k;
                    let cropped = ctx.tape.crop_center(node, k);
                    let flat = ctx.tape.reshape(cropped, &[channels, k * k]);
                    let trans = ctx.tape.mat_transform(flat, m);
                    node = ctx.tape.reshape(trans, &[channels, k, k]);
                }
                node
            }
        }
    }
}

/// State of one stage-incremental execution: the op tape, the feature cache,
/// the backing parameter store (if any), and per-layer weight-node memos.
pub struct ExecCtx<'a> {
    pub tape: Tape,
    pub cache: StageFeatureCache,
    pub store: Option<&'a ParamStore>,
    pub(crate) memo: HashMap<LayerKey, MaterializedNodes>,
    pub(crate) image: Option<NodeId>,
}

/// Tape nodes of one layer's materialized weights, built once per execution.
#[derive(Debug, Clone, Default)]
pub struct MaterializedNodes {
    pub conv: Vec<NodeId>,
    pub conv2: Vec<Vec<NodeId>>,
    pub norm: Vec<(NodeId, NodeId)>,
    pub norm2: Vec<(NodeId, NodeId)>,
    pub norm3: Vec<(NodeId, NodeId)>,
    pub proj: Vec<NodeId>,
    pub bias: Vec<NodeId>,
}

impl<'a> ExecCtx<'a> {
    pub fn new(grad: bool, store: Option<&'a ParamStore>) -> Self {
        ExecCtx {
            tape: Tape::new(grad),
            cache: StageFeatureCache::new(),
            store,
            memo: HashMap::new(),
            image: None,
        }
    }

    fn leaf(&mut self, param_id: usize) -> NodeId {
        let store = self.store.expect("parameter-backed weight without a store");
        self.tape.param_leaf(param_id, store.value(param_id).clone())
    }
}
