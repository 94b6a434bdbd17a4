//! Multi-stage residual block: depthwise conv (independent type, first layer),
//! pointwise expansion (input reuse), pointwise projection (output reuse,
//! last layer), each followed by normalization, with activation everywhere
//! except after the projection.
//!
//! A stage can be inactive in a block (depth sampling); inactive stages pass
//! their features through unchanged, and the lowest-indexed active stage also
//! computes the hidden-channel slices of the stages below it.

use super::cache::{LayerKey, LayerStageEntry};
use super::conv::{msconv_forward, ConvStageSpec, MsConvWeights, ReuseType};
use super::weights::{ExecCtx, MaterializedNodes, WeightSrc};
use crate::error::{Error, Result};
use crate::nn::NodeId;

pub const NORM_EPS: f64 = 1e-5;

/// One active stage of a block and the hidden channels it computes.
#[derive(Debug, Clone)]
pub struct ActiveStage {
    /// Original 1-based stage index.
    pub stage: usize,
    /// Raw hidden-channel ids this stage computes (absorbed slices included;
    /// may be empty when the stage adds no new intermediate channels).
    pub hidden_ids: Vec<usize>,
}

/// Weight sources for every layer of a block, indexed by active-stage order.
#[derive(Debug, Clone)]
pub struct BlockWeights {
    /// Depthwise kernels `[ext_in, k, k]` per active stage.
    pub dw: Vec<WeightSrc>,
    pub dw_norm: Vec<(WeightSrc, WeightSrc)>,
    /// `expand[j][k]`: weights `[slice_j, ext_in, 1, 1]` applied to active
    /// source `k <= j`.
    pub expand: Vec<Vec<WeightSrc>>,
    pub expand_norm: Vec<(WeightSrc, WeightSrc)>,
    /// Projection weights `[ext_out, slice_j, 1, 1]` per active stage.
    pub proj: Vec<WeightSrc>,
    pub proj_norm: Vec<(WeightSrc, WeightSrc)>,
}

#[derive(Debug, Clone)]
pub struct MsBlock {
    pub stages_total: usize,
    pub ext_in: usize,
    pub ext_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub residual: bool,
    pub active: Vec<ActiveStage>,
    /// Cache keys for the depthwise, expansion, and projection layers.
    pub keys: (LayerKey, LayerKey, LayerKey),
    pub weights: BlockWeights,
}

impl MsBlock {
    pub fn validate(&self) -> Result<()> {
        if self.residual && (self.ext_in != self.ext_out || self.stride != 1) {
            return Err(Error::Config(
                "residual blocks need matching channels and stride 1".into(),
            ));
        }
        if self.active.is_empty() {
            return Err(Error::Config("block needs at least one active stage".into()));
        }
        let mut prev = 0;
        for a in &self.active {
            if a.stage == 0 || a.stage > self.stages_total || a.stage <= prev {
                return Err(Error::Config("active stages must be ascending and in range".into()));
            }
            prev = a.stage;
        }
        let n = self.active.len();
        let w = &self.weights;
        if w.dw.len() != n
            || w.dw_norm.len() != n
            || w.expand.len() != n
            || w.expand_norm.len() != n
            || w.proj.len() != n
            || w.proj_norm.len() != n
        {
            return Err(Error::Config("block weight lists must match active stages".into()));
        }
        for (j, row) in w.expand.iter().enumerate() {
            if row.len() != j + 1 {
                return Err(Error::Config(
                    "expansion weights must cover exactly the earlier active sources".into(),
                ));
            }
        }
        Ok(())
    }

    /// Position of `stage` in the active list (1-based), if active.
    pub fn active_index(&self, stage: usize) -> Option<usize> {
        self.active.iter().position(|a| a.stage == stage).map(|i| i + 1)
    }

    pub fn hidden_width(&self, active_idx: usize) -> usize {
        self.active[active_idx - 1].hidden_ids.len()
    }

    fn specs(&self) -> (ConvStageSpec, ConvStageSpec, ConvStageSpec) {
        let n = self.active.len();
        let slices: Vec<usize> = self.active.iter().map(|a| a.hidden_ids.len()).collect();
        let dw = ConvStageSpec {
            reuse: ReuseType::Independent,
            stages: n,
            in_channels: vec![self.ext_in; n],
            out_channels: vec![self.ext_in; n],
            kernel_sizes: vec![self.kernel; n],
            stride: self.stride,
            depthwise: true,
        };
        let expand = ConvStageSpec {
            reuse: ReuseType::InputReuse,
            stages: n,
            in_channels: vec![self.ext_in; n],
            out_channels: slices.clone(),
            kernel_sizes: vec![1; n],
            stride: 1,
            depthwise: false,
        };
        let proj = ConvStageSpec {
            reuse: ReuseType::OutputReuse,
            stages: n,
            in_channels: slices,
            out_channels: vec![self.ext_out; n],
            kernel_sizes: vec![1; n],
            stride: 1,
            depthwise: false,
        };
        (dw, expand, proj)
    }

    fn materialize(&self, ctx: &mut ExecCtx) -> MaterializedNodes {
        if let Some(nodes) = ctx.memo.get(&self.keys.0) {
            return nodes.clone();
        }
        let w = &self.weights;
        let nodes = MaterializedNodes {
            conv: w.dw.iter().map(|s| s.materialize(ctx)).collect(),
            conv2: w
                .expand
                .iter()
                .map(|row| row.iter().map(|s| s.materialize(ctx)).collect())
                .collect(),
            proj: w.proj.iter().map(|s| s.materialize(ctx)).collect(),
            norm: w
                .dw_norm
                .iter()
                .map(|(g, b)| (g.materialize(ctx), b.materialize(ctx)))
                .collect(),
            norm2: w
                .expand_norm
                .iter()
                .map(|(g, b)| (g.materialize(ctx), b.materialize(ctx)))
                .collect(),
            norm3: w
                .proj_norm
                .iter()
                .map(|(g, b)| (g.materialize(ctx), b.materialize(ctx)))
                .collect(),
            bias: Vec::new(),
        };
        ctx.memo.insert(self.keys.0, nodes.clone());
        nodes
    }

    /// Run stage `stage` (original index) through the block. Inactive stages
    /// pass through (identity, or a stride-matched average pool).
    pub fn forward_stage(
        &self,
        ctx: &mut ExecCtx,
        stage: usize,
        ext_input: NodeId,
    ) -> Result<NodeId> {
        if stage == 0 || stage > self.stages_total {
            return Err(Error::StageIndex { stage, stages: self.stages_total });
        }
        let Some(j) = self.active_index(stage) else {
            return Ok(if self.stride == 1 {
                ext_input
            } else {
                ctx.tape.avg_pool(ext_input, self.stride)
            });
        };

        let got = ctx.tape.value(ext_input).shape()[1];
        if got != self.ext_in {
            return Err(Error::Shape(format!(
                "block input has {got} channels, expected {}",
                self.ext_in
            )));
        }

        let nodes = self.materialize(ctx);
        let (dw_spec, expand_spec, proj_spec) = self.specs();
        let (dw_key, expand_key, proj_key) = self.keys;

        // Depthwise, independent type.
        let dw_w = MsConvWeights::Independent(nodes.conv.clone());
        let y_dw = msconv_forward(&mut ctx.tape, &dw_spec, &dw_w, j, ext_input, &ctx.cache, dw_key)?;
        ctx.cache.insert(dw_key, j, LayerStageEntry { input: ext_input, output: y_dw });
        let (g, b) = nodes.norm[j - 1];
        let t = ctx.tape.slice_norm(y_dw, g, b, NORM_EPS);
        let t = ctx.tape.relu(t);

        // Pointwise expansion, input reuse over earlier active stages.
        let ex_w = MsConvWeights::InputReuse(nodes.conv2.clone());
        let h = msconv_forward(&mut ctx.tape, &expand_spec, &ex_w, j, t, &ctx.cache, expand_key)?;
        ctx.cache.insert(expand_key, j, LayerStageEntry { input: t, output: h });
        let (g, b) = nodes.norm2[j - 1];
        let hn = ctx.tape.slice_norm(h, g, b, NORM_EPS);
        let hn = ctx.tape.relu(hn);

        // Pointwise projection, output reuse; normalization only afterwards.
        let pr_w = MsConvWeights::OutputReuse(nodes.proj.clone());
        let p = msconv_forward(&mut ctx.tape, &proj_spec, &pr_w, j, hn, &ctx.cache, proj_key)?;
        ctx.cache.insert(proj_key, j, LayerStageEntry { input: hn, output: p });
        let (g, b) = nodes.norm3[j - 1];
        let y = ctx.tape.slice_norm(p, g, b, NORM_EPS);

        Ok(if self.residual { ctx.tape.add(y, ext_input) } else { y })
    }
}
