//! Multi-stage network assembly: an independent-type stem convolution, block
//! groups, and one prediction head (global average pool + linear) per stage,
//! executed stage-incrementally through a feature cache.

use super::block::{MsBlock, NORM_EPS};
use super::cache::{LayerKey, LayerStageEntry};
use super::conv::{msconv_forward, ConvStageSpec, MsConvWeights, ReuseType};
use super::weights::{ExecCtx, MaterializedNodes, WeightSrc};
use crate::error::{Error, Result};
use crate::nn::ops::softmax_rows;
use crate::nn::NodeId;
use crate::tensor::Tensor;

/// Per-stage classifier output for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct StagePrediction {
    pub logits: Vec<f64>,
    /// Highest softmax probability.
    pub confidence: f64,
    pub predicted_class: usize,
}

impl StagePrediction {
    pub fn from_logits(row: &[f64]) -> Self {
        let t = Tensor::from_vec(&[1, row.len()], row.to_vec()).unwrap();
        let probs = softmax_rows(&t);
        let mut best = 0;
        for i in 1..row.len() {
            if probs.data()[i] > probs.data()[best] {
                best = i;
            }
        }
        StagePrediction {
            logits: row.to_vec(),
            confidence: probs.data()[best],
            predicted_class: best,
        }
    }
}

/// Independent-type stem convolution: each stage extracts its own features
/// from the input image.
#[derive(Debug, Clone)]
pub struct StemLayer {
    pub key: LayerKey,
    pub kernel: usize,
    pub stride: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    /// `[out_ch, in_ch, k, k]` per stage.
    pub w: Vec<WeightSrc>,
    pub norm: Vec<(WeightSrc, WeightSrc)>,
}

/// Per-stage prediction head.
#[derive(Debug, Clone)]
pub struct HeadLayer {
    pub key: LayerKey,
    /// `[num_classes, features]`.
    pub w: WeightSrc,
    pub b: WeightSrc,
}

#[derive(Debug, Clone)]
pub struct MsNetwork {
    pub stages: usize,
    pub num_classes: usize,
    /// Square input resolution this network was materialized for.
    pub resolution: usize,
    pub stem: StemLayer,
    pub blocks: Vec<MsBlock>,
    pub heads: Vec<HeadLayer>,
}

/// Result of running one stage: the logits node plus per-sample predictions.
pub struct StageOutput {
    pub logits: NodeId,
    pub predictions: Vec<StagePrediction>,
}

impl MsNetwork {
    pub fn validate(&self) -> Result<()> {
        if self.heads.len() != self.stages || self.stem.w.len() != self.stages {
            return Err(Error::Config("stem/head lists must match stage count".into()));
        }
        for b in &self.blocks {
            b.validate()?;
        }
        Ok(())
    }

    fn stem_nodes(&self, ctx: &mut ExecCtx) -> MaterializedNodes {
        if let Some(n) = ctx.memo.get(&self.stem.key) {
            return n.clone();
        }
        let nodes = MaterializedNodes {
            conv: self.stem.w.iter().map(|s| s.materialize(ctx)).collect(),
            norm: self
                .stem
                .norm
                .iter()
                .map(|(g, b)| (g.materialize(ctx), b.materialize(ctx)))
                .collect(),
            ..Default::default()
        };
        ctx.memo.insert(self.stem.key, nodes.clone());
        nodes
    }

    /// Run stage `stage` (1-based) on `images` (`[B, C, R, R]`). Stages must
    /// be executed in order within one execution context, on the same batch.
    pub fn forward_stage(
        &self,
        ctx: &mut ExecCtx,
        stage: usize,
        images: &Tensor,
    ) -> Result<StageOutput> {
        if stage == 0 || stage > self.stages {
            return Err(Error::StageIndex { stage, stages: self.stages });
        }
        ctx.cache.expect_next_stage(stage)?;
        let shape = images.shape();
        if shape.len() != 4 || shape[1] != self.stem.in_ch {
            return Err(Error::Shape(format!("expected [B, {}, R, R] input", self.stem.in_ch)));
        }
        if shape[2] != self.resolution || shape[3] != self.resolution {
            return Err(Error::Cache(format!(
                "input resolution {}x{} does not match network resolution {}",
                shape[2], shape[3], self.resolution
            )));
        }
        ctx.cache.check_resolution(self.resolution)?;

        let image_node = match ctx.image {
            None => {
                let n = ctx.tape.constant(images.clone());
                ctx.image = Some(n);
                n
            }
            Some(n) => {
                if ctx.tape.value(n).data() != images.data() {
                    return Err(Error::Cache(
                        "stages of one execution must see the same input batch".into(),
                    ));
                }
                n
            }
        };

        // Stem.
        let nodes = self.stem_nodes(ctx);
        let s = self.stages;
        let stem_spec = ConvStageSpec {
            reuse: ReuseType::Independent,
            stages: s,
            in_channels: vec![self.stem.in_ch; s],
            out_channels: vec![self.stem.out_ch; s],
            kernel_sizes: vec![self.stem.kernel; s],
            stride: self.stem.stride,
            depthwise: false,
        };
        let stem_w = MsConvWeights::Independent(nodes.conv.clone());
        let y = msconv_forward(
            &mut ctx.tape,
            &stem_spec,
            &stem_w,
            stage,
            image_node,
            &ctx.cache,
            self.stem.key,
        )?;
        ctx.cache
            .insert(self.stem.key, stage, LayerStageEntry { input: image_node, output: y });
        let (g, b) = nodes.norm[stage - 1];
        let y = ctx.tape.slice_norm(y, g, b, NORM_EPS);
        let mut x = ctx.tape.relu(y);

        // Blocks.
        for block in &self.blocks {
            x = block.forward_stage(ctx, stage, x)?;
        }

        // Head: global average pool + per-stage linear classifier.
        let pooled = ctx.tape.global_avg_pool(x);
        let head = &self.heads[stage - 1];
        let hw = head.w.materialize(ctx);
        let hb = head.b.materialize(ctx);
        let logits = ctx.tape.linear(pooled, hw, hb);

        let lv = ctx.tape.value(logits);
        let batch = lv.shape()[0];
        let k = lv.shape()[1];
        let predictions = (0..batch)
            .map(|i| StagePrediction::from_logits(&lv.data()[i * k..(i + 1) * k]))
            .collect();
        ctx.cache.mark_stage_done(stage)?;
        Ok(StageOutput { logits, predictions })
    }
}
