//! Multi-stage convolution: one logical layer evaluated stage by stage, with
//! three wirings for how a stage uses earlier stages' features.
//!
//! * `Independent` — each stage convolves its own input with its own weights.
//! * `InputReuse` — stage `s` additionally convolves the cached inputs of
//!   stages `1..s` (equivalent to concatenating them channel-wise).
//! * `OutputReuse` — stage `s` convolves its own input and adds the previous
//!   stage's raw output; all stages share one output width.

use serde::{Deserialize, Serialize};

use super::cache::{LayerKey, StageFeatureCache};
use crate::error::{Error, Result};
use crate::nn::{NodeId, Tape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReuseType {
    Independent,
    InputReuse,
    OutputReuse,
}

/// Configuration of one multi-stage convolution layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvStageSpec {
    pub reuse: ReuseType,
    pub stages: usize,
    /// Incremental input channels owned by each stage.
    pub in_channels: Vec<usize>,
    /// Output channels per stage (all equal for output reuse).
    pub out_channels: Vec<usize>,
    /// Kernel size per stage (odd).
    pub kernel_sizes: Vec<usize>,
    pub stride: usize,
    /// Per-channel (depthwise) convolution; only legal with `Independent`.
    pub depthwise: bool,
}

impl ConvStageSpec {
    pub fn padding(&self, stage: usize) -> usize {
        self.kernel_sizes[stage - 1] / 2
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.stages;
        if s == 0 {
            return Err(Error::Config("stage count must be >= 1".into()));
        }
        if self.in_channels.len() != s
            || self.out_channels.len() != s
            || self.kernel_sizes.len() != s
        {
            return Err(Error::Config(format!(
                "per-stage lists must have length {s}"
            )));
        }
        if self.in_channels.iter().sum::<usize>() == 0 {
            return Err(Error::Config("at least one stage must own input channels".into()));
        }
        if self.kernel_sizes.iter().any(|k| k % 2 == 0) {
            return Err(Error::Config("kernel sizes must be odd".into()));
        }
        if self.stride == 0 {
            return Err(Error::Config("stride must be positive".into()));
        }
        if self.reuse == ReuseType::OutputReuse {
            let o = self.out_channels[0];
            if self.out_channels.iter().any(|&c| c != o) {
                return Err(Error::Config(
                    "output reuse requires equal output channels across stages".into(),
                ));
            }
        }
        if self.depthwise {
            if self.reuse != ReuseType::Independent {
                return Err(Error::Config("depthwise layers must be independent type".into()));
            }
            if self.in_channels != self.out_channels {
                return Err(Error::Config(
                    "depthwise layers need matching in/out channels".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Weight tape nodes for one multi-stage convolution layer.
///
/// Dense weights are `[out, in, k, k]`; depthwise weights are `[c, k, k]`.
pub enum MsConvWeights {
    /// `per_stage[s-1]` holds stage s's own weights.
    Independent(Vec<NodeId>),
    /// `per_source[s-1][k-1]` holds the weights applied to stage k's input
    /// when computing stage s (`k <= s`).
    InputReuse(Vec<Vec<NodeId>>),
    /// `per_stage[s-1]` holds stage s's own weights; outputs chain additively.
    OutputReuse(Vec<NodeId>),
}

/// Evaluate stage `stage` (1-based) of a multi-stage convolution layer.
///
/// Reads earlier-stage features from `cache` under `layer` as required by the
/// reuse type. The caller is responsible for storing this stage's input and
/// the returned output back into the cache.
pub fn msconv_forward(
    tape: &mut Tape,
    spec: &ConvStageSpec,
    weights: &MsConvWeights,
    stage: usize,
    own_input: NodeId,
    cache: &StageFeatureCache,
    layer: LayerKey,
) -> Result<NodeId> {
    if stage == 0 || stage > spec.stages {
        return Err(Error::StageIndex { stage, stages: spec.stages });
    }
    let got_ch = tape.value(own_input).shape()[1];
    let want_ch = spec.in_channels[stage - 1];
    if got_ch != want_ch {
        return Err(Error::Shape(format!(
            "stage {stage} input has {got_ch} channels, spec says {want_ch}"
        )));
    }
    let pad = spec.padding(stage);

    match (&spec.reuse, weights) {
        (ReuseType::Independent, MsConvWeights::Independent(ws)) => {
            let w = ws[stage - 1];
            Ok(if spec.depthwise {
                tape.dwconv2d(own_input, w, spec.stride, pad)
            } else {
                tape.conv2d(own_input, w, spec.stride, pad)
            })
        }
        (ReuseType::InputReuse, MsConvWeights::InputReuse(ws)) => {
            let stage_ws = &ws[stage - 1];
            if stage_ws.len() != stage {
                return Err(Error::Config(format!(
                    "input reuse stage {stage} needs {stage} weight tensors, got {}",
                    stage_ws.len()
                )));
            }
            let mut acc = tape.conv2d(own_input, stage_ws[stage - 1], spec.stride, pad);
            for source in 1..stage {
                let entry = cache.get(layer, source)?;
                let term = tape.conv2d(entry.input, stage_ws[source - 1], spec.stride, pad);
                acc = tape.add(acc, term);
            }
            Ok(acc)
        }
        (ReuseType::OutputReuse, MsConvWeights::OutputReuse(ws)) => {
            let own = tape.conv2d(own_input, ws[stage - 1], spec.stride, pad);
            if stage == 1 {
                Ok(own)
            } else {
                let prev = cache.get(layer, stage - 1)?;
                Ok(tape.add(own, prev.output))
            }
        }
        _ => Err(Error::Config("weight layout does not match reuse type".into())),
    }
}
